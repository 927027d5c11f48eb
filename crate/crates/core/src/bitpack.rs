//! Two's-complement lane packing for 4, 8 and 16 bit integers.
//!
//! 4-bit lanes fill the low nibble first; 16-bit lanes are little-endian.
//! A packed run always ends on a byte boundary.

use crate::error::{Result, UpaqError};
use crate::quantizer::check_bits;

/// Bytes needed for `count` lanes of `bits` each.
pub fn packed_len(count: usize, bits: u32) -> usize {
    (count * bits as usize).div_ceil(8)
}

pub fn pack(values: &[i32], bits: u32, out: &mut Vec<u8>) -> Result<()> {
    check_bits(bits)?;
    let lim = (1i32 << (bits - 1)) - 1;
    if let Some(v) = values.iter().find(|v| v.abs() > lim) {
        return Err(UpaqError::Param(format!("value {v} does not fit in {bits} bits")));
    }
    match bits {
        4 => {
            for pair in values.chunks(2) {
                let lo = (pair[0] as u8) & 0x0f;
                let hi = pair.get(1).map_or(0, |v| (*v as u8) & 0x0f);
                out.push(lo | (hi << 4));
            }
        }
        8 => out.extend(values.iter().map(|&v| v as i8 as u8)),
        _ => {
            for &v in values {
                out.extend_from_slice(&(v as i16).to_le_bytes());
            }
        }
    }
    Ok(())
}

pub fn unpack(bytes: &[u8], bits: u32, count: usize) -> Result<Vec<i32>> {
    check_bits(bits)?;
    if bytes.len() != packed_len(count, bits) {
        return Err(UpaqError::Format(format!(
            "packed run has {} bytes, expected {} for {count} x {bits}-bit",
            bytes.len(),
            packed_len(count, bits)
        )));
    }
    let values = match bits {
        4 => (0..count)
            .map(|i| {
                let nib = (bytes[i / 2] >> ((i % 2) * 4)) & 0x0f;
                // sign-extend the nibble
                ((nib << 4) as i8 >> 4) as i32
            })
            .collect(),
        8 => bytes.iter().map(|&b| b as i8 as i32).collect(),
        _ => bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as i32)
            .collect(),
    };
    Ok(values)
}

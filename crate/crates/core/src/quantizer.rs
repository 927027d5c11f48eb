//! Symmetric per-slice quantization and SQNR.
//!
//! A slice `x` is mapped to integers in `[-(2^(b-1)-1), 2^(b-1)-1]` with
//! `scale = max(|min x|, |max x|) / (2^(b-1)-1)`. Rounding is half away from
//! zero so that `quantize(-x) == -quantize(x)` holds exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UpaqError};

pub const SUPPORTED_BITS: [u32; 3] = [4, 8, 16];

/// Linear SQNR reported when the reconstruction error has no variance.
pub const SQNR_CAP: f64 = 1e12;

/// `SQNR_CAP` in decibels.
pub const SQNR_CAP_DB: f64 = 120.0;

const ZERO_NOISE: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantResult {
    pub q_values: Vec<i32>,
    pub scale: f32,
    pub bitwidth: u32,
    pub sqnr_linear: f64,
    pub sqnr_db: f64,
}

impl QuantResult {
    pub fn dequantized(&self) -> Vec<f32> {
        dequantize(&self.q_values, self.scale)
    }
}

pub fn check_bits(bits: u32) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(UpaqError::UnsupportedBitwidth(bits))
    }
}

/// Largest representable magnitude, `2^(bits-1) - 1`.
pub fn max_level(bits: u32) -> i32 {
    (1i32 << (bits - 1)) - 1
}

#[inline]
fn round_half_away(v: f64) -> f64 {
    // f64::round already rounds half away from zero
    v.round()
}

pub fn mp_quantize(slice: &[f32], bits: u32) -> Result<QuantResult> {
    check_bits(bits)?;
    if slice.iter().any(|v| !v.is_finite()) {
        return Err(UpaqError::NonFinite("quantizer input".into()));
    }
    let max_value = max_level(bits);
    let lo = slice.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = slice.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let alpha = if slice.is_empty() { 0.0 } else { lo.abs().max(hi.abs()) };

    let scale = if alpha > 0.0 { alpha / max_value as f32 } else { 1.0 };
    // Subnormal alpha can underflow the division.
    let scale = if scale > 0.0 { scale } else { 1.0 };

    let limit = max_value as f64;
    let q_values: Vec<i32> = slice
        .iter()
        .map(|&x| round_half_away(x as f64 / scale as f64).clamp(-limit, limit) as i32)
        .collect();

    let recon = dequantize(&q_values, scale);
    let (sqnr_linear, sqnr_db) = sqnr(slice, &recon);
    Ok(QuantResult {
        q_values,
        scale,
        bitwidth: bits,
        sqnr_linear,
        sqnr_db,
    })
}

pub fn dequantize(q_values: &[i32], scale: f32) -> Vec<f32> {
    q_values.iter().map(|&q| (q as f64 * scale as f64) as f32).collect()
}

/// Population variance, accumulated in f64.
pub fn population_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (sum, count) = values.clone().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if count == 0 {
        return 0.0;
    }
    let mean = sum / count as f64;
    values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64
}

/// `(linear, dB)` ratio of signal variance to reconstruction-error variance.
/// Both are capped at [`SQNR_CAP`] / [`SQNR_CAP_DB`]; dB is floored at
/// `-SQNR_CAP_DB`.
pub fn sqnr(signal: &[f32], recon: &[f32]) -> (f64, f64) {
    let var_x = population_variance(signal.iter().map(|&v| v as f64));
    let var_e = population_variance(signal.iter().zip(recon).map(|(&x, &r)| x as f64 - r as f64));
    let linear = if var_e < ZERO_NOISE {
        SQNR_CAP
    } else {
        (var_x / var_e).min(SQNR_CAP)
    };
    let db = if linear > 0.0 {
        (10.0 * linear.log10()).clamp(-SQNR_CAP_DB, SQNR_CAP_DB)
    } else {
        -SQNR_CAP_DB
    };
    (linear, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_8bit() {
        let r = mp_quantize(&[1.0, -2.0, 0.5, 0.0], 8).unwrap();
        assert_eq!(r.scale, 2.0f32 / 127.0);
        assert_eq!(r.q_values, vec![64, -127, 32, 0]);
        let d = r.dequantized();
        assert!((d[0] - 1.007_874).abs() < 1e-6);
        assert_eq!(d[1], -2.0);
        assert!((d[2] - 0.503_937).abs() < 1e-6);
        assert_eq!(d[3], 0.0);
    }

    #[test]
    fn all_zero_slice_falls_back() {
        let r = mp_quantize(&[0.0; 9], 4).unwrap();
        assert_eq!(r.scale, 1.0);
        assert!(r.q_values.iter().all(|&q| q == 0));
        assert_eq!(r.sqnr_linear, SQNR_CAP);
        assert_eq!(r.sqnr_db, SQNR_CAP_DB);
        assert_eq!(dequantize(&r.q_values, r.scale), vec![0.0; 9]);
    }

    #[test]
    fn representable_values_are_lossless() {
        let r = mp_quantize(&[-0.75, 0.0, 0.75], 8).unwrap();
        assert_eq!(r.q_values, vec![-127, 0, 127]);
        assert_eq!(r.sqnr_linear, SQNR_CAP);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(mp_quantize(&[1.0], 3), Err(UpaqError::UnsupportedBitwidth(3))));
        assert!(matches!(mp_quantize(&[f32::NAN], 8), Err(UpaqError::NonFinite(_))));
    }

    #[test]
    fn levels() {
        assert_eq!(max_level(4), 7);
        assert_eq!(max_level(8), 127);
        assert_eq!(max_level(16), 32767);
    }
}

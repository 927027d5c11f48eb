//! `.upaq` and `.upaqc` containers.
//!
//! ```text
//! magic (5 bytes) | header length: u32 LE | JSON header | blob
//! ```
//!
//! The dense container (`UPAQ1`) stores every weight and bias as a
//! little-endian f32 in the blob. The compressed container (`UPQC1`) stores,
//! in order: one row-major, LSB-first bitmask per group, then per layer its
//! bias (f32), and either dense f32 weights or per-slice f32 scales followed
//! by byte-padded two's-complement integer runs. All offsets in the header
//! are byte offsets into the blob. Serialization is canonical: the same model
//! always produces the same bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bitpack::{pack, packed_len, unpack};
use crate::compressed::{CompressedLayer, CompressedModel, GroupRecord, LayerWeights, PackedWeights, SliceLayout};
use crate::compressor::EfficiencyScore;
use crate::error::{Result, UpaqError};
use crate::model::{LayerKind, LayerSpec, ModelGraph, Shape3, Tensor4};
use crate::patterns::{mask_byte_len, mask_to_bytes, KernelPattern};

pub const DENSE_MAGIC: &[u8; 5] = b"UPAQ1";
pub const COMPRESSED_MAGIC: &[u8; 5] = b"UPQC1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct F32Ref {
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRef {
    shape: [usize; 4],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DenseLayerHeader {
    id: String,
    kind: LayerKind,
    inputs: Vec<String>,
    stride: usize,
    padding: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    weights: Option<TensorRef>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    bias: Option<F32Ref>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DenseHeader {
    version: u32,
    name: String,
    input_shape: Shape3,
    blob_bytes: usize,
    layers: Vec<DenseLayerHeader>,
}

struct Blob(Vec<u8>);

impl Blob {
    fn push_f32s(&mut self, values: &[f32], what: &str) -> Result<F32Ref> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(UpaqError::NonFinite(what.to_string()));
        }
        let offset = self.0.len();
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
        Ok(F32Ref {
            offset,
            len: values.len(),
        })
    }
}

fn read_f32s(blob: &[u8], offset: usize, len: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = len
        .checked_mul(4)
        .and_then(|n| byte_range(blob, offset, n))
        .ok_or_else(|| UpaqError::Format(format!("{what} runs past the end of the blob")))?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(UpaqError::NonFinite(what.to_string()));
    }
    Ok(values)
}

fn byte_range(blob: &[u8], offset: usize, len: usize) -> Option<&[u8]> {
    blob.get(offset..offset.checked_add(len)?)
}

fn frame(magic: &[u8; 5], header: &[u8], blob: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + header.len() + blob.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(blob);
    out
}

/// Splits a container into `(header, blob)` after checking its magic.
fn unframe<'a>(magic: &[u8; 5], bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 9 {
        return Err(UpaqError::Format("file too short for a container".into()));
    }
    if &bytes[..5] != magic {
        return Err(UpaqError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..5]),
            String::from_utf8_lossy(magic)
        )));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let header = bytes
        .get(9..9 + header_len)
        .ok_or_else(|| UpaqError::Format("truncated header".into()))?;
    Ok((header, &bytes[9 + header_len..]))
}

fn check_version(version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(UpaqError::Format(format!(
            "format version {version} not supported (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

fn check_blob(blob: &[u8], declared: usize) -> Result<()> {
    if blob.len() != declared {
        return Err(UpaqError::Format(format!(
            "blob holds {} bytes, header declares {declared} (truncated or padded file)",
            blob.len()
        )));
    }
    Ok(())
}

/// Canonical bytes of a dense model.
pub fn model_to_bytes(model: &ModelGraph) -> Result<Vec<u8>> {
    model.validate()?;
    let mut blob = Blob(Vec::new());
    let mut layers = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        let weights = match &l.weights {
            Some(w) => Some(TensorRef {
                shape: w.shape(),
                offset: blob.push_f32s(&w.data, &format!("weights of '{}'", l.id))?.offset,
            }),
            None => None,
        };
        let bias = match &l.bias {
            Some(b) => Some(blob.push_f32s(b, &format!("bias of '{}'", l.id))?),
            None => None,
        };
        layers.push(DenseLayerHeader {
            id: l.id.clone(),
            kind: l.kind,
            inputs: l.inputs.clone(),
            stride: l.stride,
            padding: l.padding,
            weights,
            bias,
        });
    }
    let header = DenseHeader {
        version: FORMAT_VERSION,
        name: model.name.clone(),
        input_shape: model.input_shape,
        blob_bytes: blob.0.len(),
        layers,
    };
    Ok(frame(DENSE_MAGIC, &serde_json::to_vec(&header)?, &blob.0))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    let (header, blob) = unframe(DENSE_MAGIC, bytes)?;
    let header: DenseHeader = serde_json::from_slice(header)?;
    check_version(header.version)?;
    check_blob(blob, header.blob_bytes)?;
    let mut layers = Vec::with_capacity(header.layers.len());
    for l in header.layers {
        let weights = match l.weights {
            Some(t) => {
                let [o, i, kh, kw] = t.shape;
                let data = read_f32s(blob, t.offset, o * i * kh * kw, &format!("weights of '{}'", l.id))?;
                Some(Tensor4::new(o, i, kh, kw, data)?)
            }
            None => None,
        };
        let bias = match l.bias {
            Some(b) => Some(read_f32s(blob, b.offset, b.len, &format!("bias of '{}'", l.id))?),
            None => None,
        };
        layers.push(LayerSpec {
            id: l.id,
            kind: l.kind,
            weights,
            bias,
            stride: l.stride,
            padding: l.padding,
            inputs: l.inputs,
        });
    }
    ModelGraph::new(header.name, header.input_shape, layers)
}

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let bytes = model_to_bytes(model)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    model_from_bytes(&fs::read(path)?)
}

/// Hex SHA-256 of the canonical serialization.
pub fn checksum(model: &ModelGraph) -> Result<String> {
    Ok(hex_digest(&model_to_bytes(model)?))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct GroupHeader {
    root: String,
    leaves: Vec<String>,
    pattern: KernelPattern,
    bitwidth: u32,
    mean_sqnr_db: f64,
    score: EfficiencyScore,
    mask_offset: usize,
    mask_bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "encoding", rename_all = "snake_case")]
enum WeightsHeader {
    Dense {
        shape: [usize; 4],
        offset: usize,
    },
    Packed {
        shape: [usize; 4],
        group: String,
        layout: SliceLayout,
        bitwidth: u32,
        units: usize,
        scales_offset: usize,
        values_offset: usize,
        values_bytes: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct CompressedLayerHeader {
    id: String,
    kind: LayerKind,
    inputs: Vec<String>,
    stride: usize,
    padding: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    bias: Option<F32Ref>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    weights: Option<WeightsHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CompressedHeader {
    version: u32,
    name: String,
    input_shape: Shape3,
    profile: String,
    quant_bits: Vec<u32>,
    blob_bytes: usize,
    groups: Vec<GroupHeader>,
    layers: Vec<CompressedLayerHeader>,
}

fn group_of<'a>(model: &'a CompressedModel, id: &str) -> Result<&'a GroupRecord> {
    model
        .groups
        .iter()
        .find(|g| g.members().any(|m| m == id))
        .ok_or_else(|| UpaqError::validation(id, "compressed layer belongs to no group"))
}

/// Canonical bytes of a compressed model.
pub fn compressed_to_bytes(model: &CompressedModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut blob = Blob(Vec::new());
    let mut groups = Vec::with_capacity(model.groups.len());
    for g in &model.groups {
        let mask = mask_to_bytes(&g.pattern);
        let mask_offset = blob.0.len();
        blob.0.extend_from_slice(&mask);
        groups.push(GroupHeader {
            root: g.root_id.clone(),
            leaves: g.leaf_ids.clone(),
            pattern: g.pattern.clone(),
            bitwidth: g.bitwidth,
            mean_sqnr_db: g.mean_sqnr_db,
            score: g.score,
            mask_offset,
            mask_bytes: mask.len(),
        });
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        let bias = match &l.bias {
            Some(b) => Some(blob.push_f32s(b, &format!("bias of '{}'", l.id))?),
            None => None,
        };
        let weights = match &l.weights {
            LayerWeights::None => None,
            LayerWeights::Dense(t) => Some(WeightsHeader::Dense {
                shape: t.shape(),
                offset: blob.push_f32s(&t.data, &format!("weights of '{}'", l.id))?.offset,
            }),
            LayerWeights::Packed(p) => {
                let scales_offset = blob.push_f32s(&p.scales, &format!("scales of '{}'", l.id))?.offset;
                let values_offset = blob.0.len();
                for run in &p.values {
                    pack(run, p.bitwidth, &mut blob.0)?;
                }
                Some(WeightsHeader::Packed {
                    shape: p.shape,
                    group: group_of(model, &l.id)?.root_id.clone(),
                    layout: p.layout,
                    bitwidth: p.bitwidth,
                    units: p.unit_count(),
                    scales_offset,
                    values_offset,
                    values_bytes: blob.0.len() - values_offset,
                })
            }
        };
        layers.push(CompressedLayerHeader {
            id: l.id.clone(),
            kind: l.kind,
            inputs: l.inputs.clone(),
            stride: l.stride,
            padding: l.padding,
            bias,
            weights,
        });
    }
    let header = CompressedHeader {
        version: FORMAT_VERSION,
        name: model.name.clone(),
        input_shape: model.input_shape,
        profile: model.profile.clone(),
        quant_bits: model.quant_bits.clone(),
        blob_bytes: blob.0.len(),
        groups,
        layers,
    };
    Ok(frame(COMPRESSED_MAGIC, &serde_json::to_vec(&header)?, &blob.0))
}

pub fn compressed_from_bytes(bytes: &[u8]) -> Result<CompressedModel> {
    let (header, blob) = unframe(COMPRESSED_MAGIC, bytes)?;
    let header: CompressedHeader = serde_json::from_slice(header)?;
    check_version(header.version)?;
    check_blob(blob, header.blob_bytes)?;

    let mut groups = Vec::with_capacity(header.groups.len());
    for g in header.groups {
        g.pattern.check()?;
        let mask = byte_range(blob, g.mask_offset, g.mask_bytes)
            .ok_or_else(|| UpaqError::Format(format!("mask of group '{}' runs past the blob", g.root)))?;
        if g.mask_bytes != mask_byte_len(g.pattern.d) || mask != mask_to_bytes(&g.pattern).as_slice() {
            return Err(UpaqError::Format(format!(
                "mask of group '{}' disagrees with its pattern",
                g.root
            )));
        }
        groups.push(GroupRecord {
            root_id: g.root,
            leaf_ids: g.leaves,
            pattern: g.pattern,
            bitwidth: g.bitwidth,
            mean_sqnr_db: g.mean_sqnr_db,
            score: g.score,
        });
    }

    let mut layers = Vec::with_capacity(header.layers.len());
    for l in header.layers {
        let bias = match l.bias {
            Some(b) => Some(read_f32s(blob, b.offset, b.len, &format!("bias of '{}'", l.id))?),
            None => None,
        };
        let weights = match l.weights {
            None => LayerWeights::None,
            Some(WeightsHeader::Dense { shape, offset }) => {
                let [o, i, kh, kw] = shape;
                let data = read_f32s(blob, offset, o * i * kh * kw, &format!("weights of '{}'", l.id))?;
                LayerWeights::Dense(Tensor4::new(o, i, kh, kw, data)?)
            }
            Some(WeightsHeader::Packed {
                shape,
                group,
                layout,
                bitwidth,
                units,
                scales_offset,
                values_offset,
                values_bytes,
            }) => {
                let pattern = groups
                    .iter()
                    .find(|g| g.root_id == group)
                    .map(|g| g.pattern.clone())
                    .ok_or_else(|| UpaqError::Format(format!("layer '{}' references unknown group '{group}'", l.id)))?;
                if matches!(layout, SliceLayout::Blocks { k } if k != pattern.d) {
                    return Err(UpaqError::Format(format!(
                        "layer '{}' block size differs from its pattern",
                        l.id
                    )));
                }
                let scales = read_f32s(blob, scales_offset, units, &format!("scales of '{}'", l.id))?;
                let mut packed = PackedWeights {
                    shape,
                    layout,
                    bitwidth,
                    pattern,
                    scales,
                    values: Vec::new(),
                };
                if packed.unit_count() != units {
                    return Err(UpaqError::Format(format!("layer '{}' declares {units} units", l.id)));
                }
                let mut cursor = values_offset;
                for u in 0..units {
                    let count = packed.unit_positions(u).len();
                    let len = packed_len(count, bitwidth);
                    let bytes = byte_range(blob, cursor, len)
                        .ok_or_else(|| UpaqError::Format(format!("values of '{}' run past the blob", l.id)))?;
                    packed.values.push(unpack(bytes, bitwidth, count)?);
                    cursor += len;
                }
                if cursor - values_offset != values_bytes {
                    return Err(UpaqError::Format(format!("values of '{}' have the wrong length", l.id)));
                }
                LayerWeights::Packed(packed)
            }
        };
        layers.push(CompressedLayer {
            id: l.id,
            kind: l.kind,
            inputs: l.inputs,
            stride: l.stride,
            padding: l.padding,
            bias,
            weights,
        });
    }

    let model = CompressedModel {
        name: header.name,
        input_shape: header.input_shape,
        profile: header.profile,
        quant_bits: header.quant_bits,
        layers,
        groups,
    };
    model.validate()?;
    model.decompress()?;
    Ok(model)
}

pub fn save_compressed(model: &CompressedModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, compressed_to_bytes(model)?)?;
    Ok(())
}

pub fn load_compressed(path: impl AsRef<Path>) -> Result<CompressedModel> {
    compressed_from_bytes(&fs::read(path)?)
}

/// Length of the blob section of a serialized container.
pub fn blob_len(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 9 {
        return Err(UpaqError::Format("file too short for a container".into()));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    bytes
        .len()
        .checked_sub(9 + header_len)
        .ok_or_else(|| UpaqError::Format("truncated header".into()))
}

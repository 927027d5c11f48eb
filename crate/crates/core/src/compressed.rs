//! In-memory form of a compressed model.
//!
//! Each compressed conv layer keeps only the integers at its group's pattern
//! positions plus one f32 scale per kernel slice (or per block for 1x1
//! layers). Everything else stays dense f32.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::bitpack::packed_len;
use crate::compressor::EfficiencyScore;
use crate::error::{Result, UpaqError};
use crate::model::{LayerKind, LayerSpec, ModelGraph, Shape3, Tensor4};
use crate::patterns::{mask_byte_len, KernelPattern};
use crate::quantizer::{check_bits, dequantize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub root_id: String,
    pub leaf_ids: Vec<String>,
    pub pattern: KernelPattern,
    pub bitwidth: u32,
    /// Mean slice SQNR of the winning root candidate, in dB.
    pub mean_sqnr_db: f64,
    pub score: EfficiencyScore,
}

impl GroupRecord {
    pub fn members(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.root_id.as_str()).chain(self.leaf_ids.iter().map(String::as_str))
    }
}

/// How quantized values map back onto the dense tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "layout")]
pub enum SliceLayout {
    /// One unit per `(out, in)` kernel slice; the pattern lives in the slice.
    Kernel,
    /// 1x1 weights flattened and regrouped into `k x k` blocks.
    Blocks { k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeights {
    pub shape: [usize; 4],
    pub layout: SliceLayout,
    pub bitwidth: u32,
    pub pattern: KernelPattern,
    /// One scale per slice (or block).
    pub scales: Vec<f32>,
    /// Retained integers per slice, in ascending row-major pattern order.
    pub values: Vec<Vec<i32>>,
}

impl PackedWeights {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Number of quantization units (slices or blocks).
    pub fn unit_count(&self) -> usize {
        match self.layout {
            SliceLayout::Kernel => self.shape[0] * self.shape[1],
            SliceLayout::Blocks { k } => self.element_count().div_ceil(k * k),
        }
    }

    /// Dense flat indices covered by retained values of unit `u`.
    pub fn unit_positions(&self, u: usize) -> Vec<usize> {
        let idx = self.pattern.flat_indices();
        match self.layout {
            SliceLayout::Kernel => {
                let base = u * self.shape[2] * self.shape[3];
                idx.into_iter().map(|i| base + i).collect()
            }
            SliceLayout::Blocks { k } => {
                let base = u * k * k;
                let total = self.element_count();
                idx.into_iter().map(|i| base + i).filter(|&p| p < total).collect()
            }
        }
    }

    pub fn check(&self, layer: &str) -> Result<()> {
        check_bits(self.bitwidth)?;
        let fail = |msg: String| Err(UpaqError::validation(layer, msg));
        match self.layout {
            SliceLayout::Kernel => {
                if self.shape[2] != self.shape[3] || self.shape[2] != self.pattern.d {
                    return fail(format!(
                        "kernel {}x{} does not match pattern d={}",
                        self.shape[2], self.shape[3], self.pattern.d
                    ));
                }
            }
            SliceLayout::Blocks { k } => {
                if self.shape[2] != 1 || self.shape[3] != 1 || k != self.pattern.d || k < 2 {
                    return fail("block layout needs a 1x1 layer and a k x k pattern".into());
                }
            }
        }
        let units = self.unit_count();
        if self.scales.len() != units || self.values.len() != units {
            return fail(format!(
                "expected {units} scales and value runs, got {} and {}",
                self.scales.len(),
                self.values.len()
            ));
        }
        if self.scales.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return fail("scales must be positive and finite".into());
        }
        let lim = (1i32 << (self.bitwidth - 1)) - 1;
        for (u, vals) in self.values.iter().enumerate() {
            if vals.len() != self.unit_positions(u).len() {
                return fail(format!(
                    "unit {u} holds {} values, pattern keeps {}",
                    vals.len(),
                    self.unit_positions(u).len()
                ));
            }
            if vals.iter().any(|v| v.abs() > lim) {
                return fail(format!("unit {u} has a value outside the {}-bit range", self.bitwidth));
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> Tensor4 {
        let [o, i, kh, kw] = self.shape;
        let mut t = Tensor4::zeros(o, i, kh, kw);
        for (u, vals) in self.values.iter().enumerate() {
            let deq = dequantize(vals, self.scales[u]);
            for (p, v) in self.unit_positions(u).into_iter().zip(deq) {
                t.data[p] = v;
            }
        }
        t
    }

    /// Scales plus byte-padded integer runs.
    pub fn payload_bytes(&self) -> usize {
        4 * self.scales.len()
            + self
                .values
                .iter()
                .map(|v| packed_len(v.len(), self.bitwidth))
                .sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    None,
    Dense(Tensor4),
    Packed(PackedWeights),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    pub stride: usize,
    pub padding: usize,
    pub bias: Option<Vec<f32>>,
    pub weights: LayerWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub name: String,
    pub input_shape: Shape3,
    pub profile: String,
    /// Bitwidths the profile was allowed to choose from.
    pub quant_bits: Vec<u32>,
    pub layers: Vec<CompressedLayer>,
    /// Ordered by root position in the layer list.
    pub groups: Vec<GroupRecord>,
}

impl CompressedModel {
    pub fn layer(&self, id: &str) -> Option<&CompressedLayer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn packed(&self, id: &str) -> Option<&PackedWeights> {
        match self.layer(id).map(|l| &l.weights) {
            Some(LayerWeights::Packed(p)) => Some(p),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut owner: HashMap<&str, usize> = HashMap::new();
        for (g, group) in self.groups.iter().enumerate() {
            group.pattern.check()?;
            if !self.quant_bits.contains(&group.bitwidth) {
                return Err(UpaqError::validation(
                    &group.root_id,
                    format!("bitwidth {} not in profile set {:?}", group.bitwidth, self.quant_bits),
                ));
            }
            for id in group.members() {
                if owner.insert(id, g).is_some() {
                    return Err(UpaqError::validation(id, "layer appears in more than one group"));
                }
                let p = self
                    .packed(id)
                    .ok_or_else(|| UpaqError::validation(id, "group member is not a compressed layer"))?;
                if p.pattern != group.pattern || p.bitwidth != group.bitwidth {
                    return Err(UpaqError::validation(
                        id,
                        "layer pattern/bitwidth differs from its group",
                    ));
                }
            }
        }
        for layer in &self.layers {
            match &layer.weights {
                LayerWeights::Packed(p) => {
                    if !owner.contains_key(layer.id.as_str()) {
                        return Err(UpaqError::validation(&layer.id, "compressed layer belongs to no group"));
                    }
                    p.check(&layer.id)?;
                }
                LayerWeights::Dense(t) if !t.is_finite() => {
                    return Err(UpaqError::validation(&layer.id, "non-finite weight"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Materializes the dequantized dense model.
    pub fn decompress(&self) -> Result<ModelGraph> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerSpec {
                id: l.id.clone(),
                kind: l.kind,
                weights: match &l.weights {
                    LayerWeights::None => None,
                    LayerWeights::Dense(t) => Some(t.clone()),
                    LayerWeights::Packed(p) => Some(p.to_dense()),
                },
                bias: l.bias.clone(),
                stride: l.stride,
                padding: l.padding,
                inputs: l.inputs.clone(),
            })
            .collect();
        ModelGraph::new(self.name.clone(), self.input_shape, layers)
    }

    /// Bitwidth of every compressed layer, for cost models.
    pub fn bit_assignment(&self) -> BTreeMap<String, u32> {
        self.layers
            .iter()
            .filter_map(|l| match &l.weights {
                LayerWeights::Packed(p) => Some((l.id.clone(), p.bitwidth)),
                _ => None,
            })
            .collect()
    }

    /// Bytes of the container blob: pattern masks, scales, packed integers,
    /// dense remainder and biases.
    pub fn payload_bytes(&self) -> usize {
        let masks: usize = self.groups.iter().map(|g| mask_byte_len(g.pattern.d)).sum();
        let layers: usize = self
            .layers
            .iter()
            .map(|l| {
                let bias = 4 * l.bias.as_ref().map_or(0, Vec::len);
                bias + match &l.weights {
                    LayerWeights::None => 0,
                    LayerWeights::Dense(t) => 4 * t.len(),
                    LayerWeights::Packed(p) => p.payload_bytes(),
                }
            })
            .sum();
        masks + layers
    }

    /// Average of the per-group mean SQNR (dB); the SQNR cap when no groups.
    pub fn mean_sqnr_db(&self) -> f64 {
        if self.groups.is_empty() {
            return crate::quantizer::SQNR_CAP_DB;
        }
        self.groups.iter().map(|g| g.mean_sqnr_db).sum::<f64>() / self.groups.len() as f64
    }
}

/// Dense payload bytes of an uncompressed model (weights and biases as f32).
pub fn dense_payload_bytes(model: &ModelGraph) -> usize {
    4 * model.parameter_count()
}

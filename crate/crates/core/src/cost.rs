//! Cost accounting: the layers x kernels x nonzeros product, pluggable
//! latency/energy models and byte-level compression ratio.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UpaqError};
use crate::inference::{forward, Activation};
use crate::model::{LayerKind, ModelGraph};

/// Energy units charged per nonzero-weight MAC (scaled by `bits / 32`).
pub const E_MAC: f64 = 1.0;
/// Energy units charged per weight byte moved.
pub const E_BYTE: f64 = 0.1;

/// Bits of precision per conv layer id. Layers absent from the map run at 32 bits.
pub type BitAssignment = BTreeMap<String, u32>;

pub const DENSE_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub latency: f64,
    /// `None` when the model cannot observe energy (measured mode).
    pub energy: Option<f64>,
}

pub trait CostModel: Sync {
    fn name(&self) -> &'static str;
    fn estimate(&self, model: &ModelGraph, bits: &BitAssignment) -> Result<CostEstimate>;
}

/// Per conv layer MAC accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub id: String,
    pub nonzero_weights: u64,
    pub output_positions: u64,
}

impl LayerMacs {
    pub fn nonzero_macs(&self) -> u64 {
        self.nonzero_weights * self.output_positions
    }
}

pub fn conv_macs(model: &ModelGraph) -> Result<Vec<LayerMacs>> {
    let shapes = model.infer_shapes()?;
    Ok(model
        .layers
        .iter()
        .zip(&shapes)
        .filter(|(l, _)| l.kind == LayerKind::Conv2d)
        .map(|(l, s)| LayerMacs {
            id: l.id.clone(),
            nonzero_weights: l.weights.as_ref().map_or(0, |w| w.nonzero_count()) as u64,
            output_positions: (s[1] * s[2]) as u64,
        })
        .collect())
}

/// Deterministic analytical cost.
///
/// latency = sum over conv layers of nonzero MACs x bits/32;
/// energy = latency x [`E_MAC`] + weight bytes moved x [`E_BYTE`].
#[derive(Debug, Clone, Copy, Default)]
pub struct AnalyticCost;

impl CostModel for AnalyticCost {
    fn name(&self) -> &'static str {
        "analytic"
    }

    fn estimate(&self, model: &ModelGraph, bits: &BitAssignment) -> Result<CostEstimate> {
        let mut latency = 0.0;
        let mut moved_bytes = 0.0;
        for layer in conv_macs(model)? {
            let b = bits.get(&layer.id).copied().unwrap_or(DENSE_BITS) as f64;
            latency += layer.nonzero_macs() as f64 * (b / 32.0);
            moved_bytes += layer.nonzero_weights as f64 * (b / 8.0);
        }
        Ok(CostEstimate {
            latency,
            energy: Some(latency * E_MAC + moved_bytes * E_BYTE),
        })
    }
}

/// Wall-clock latency of the inference engine, in microseconds per input.
/// Energy is not observable and is reported as `None`.
#[derive(Debug, Clone)]
pub struct MeasuredCost {
    pub inputs: Vec<Activation>,
    pub repeats: usize,
}

impl CostModel for MeasuredCost {
    fn name(&self) -> &'static str {
        "measured"
    }

    fn estimate(&self, model: &ModelGraph, _bits: &BitAssignment) -> Result<CostEstimate> {
        if self.inputs.is_empty() || self.repeats == 0 {
            return Err(UpaqError::Cost("measured mode needs at least one input to run".into()));
        }
        let start = Instant::now();
        for _ in 0..self.repeats {
            for x in &self.inputs {
                forward(model, x)?;
            }
        }
        let runs = (self.repeats * self.inputs.len()) as f64;
        let micros = start.elapsed().as_secs_f64() * 1e6 / runs;
        Ok(CostEstimate {
            latency: micros.max(f64::MIN_POSITIVE),
            energy: None,
        })
    }
}

/// The product form `C = L_n x K_n x W_n` alongside the exact nonzero sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputationalCost {
    /// L_n
    pub conv_layers: usize,
    /// K_n, mean kernels (2D slices) per conv layer
    pub mean_kernels: f64,
    /// W_n, mean nonzero weights per kernel
    pub mean_nonzero_per_kernel: f64,
    pub product: f64,
    /// Sum over conv layers and kernels of nonzero weights.
    pub exact_nonzero: u64,
}

pub fn cost_product(layers: f64, kernels: f64, nonzero: f64) -> f64 {
    layers * kernels * nonzero
}

pub fn computational_cost(model: &ModelGraph) -> ComputationalCost {
    let mut layers = 0usize;
    let mut kernels = 0usize;
    let mut nonzero = 0u64;
    for w in model.conv_layers().filter_map(|l| l.weights.as_ref()) {
        layers += 1;
        kernels += w.slice_count();
        nonzero += w.nonzero_count() as u64;
    }
    let mean_kernels = if layers == 0 {
        0.0
    } else {
        kernels as f64 / layers as f64
    };
    let mean_nonzero = if kernels == 0 {
        0.0
    } else {
        nonzero as f64 / kernels as f64
    };
    ComputationalCost {
        conv_layers: layers,
        mean_kernels,
        mean_nonzero_per_kernel: mean_nonzero,
        product: cost_product(layers as f64, mean_kernels, mean_nonzero),
        exact_nonzero: nonzero,
    }
}

/// Dense payload bytes over compressed payload bytes. Headers are excluded
/// from both sides.
pub fn compression_ratio(dense_bytes: usize, compressed_bytes: usize) -> Result<f64> {
    if compressed_bytes == 0 || dense_bytes == 0 {
        return Err(UpaqError::Param("compression ratio needs nonzero byte counts".into()));
    }
    Ok(dense_bytes as f64 / compressed_bytes as f64)
}

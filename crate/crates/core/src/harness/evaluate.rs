//! Fidelity and compression reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compressed::{dense_payload_bytes, CompressedModel, GroupRecord};
use crate::compressor::{calculate_es, model_compression_ratio, CompressionProfile, EsWeights};
use crate::cost::{computational_cost, AnalyticCost, BitAssignment, ComputationalCost, CostEstimate, CostModel};
use crate::error::{Result, UpaqError};
use crate::inference::{forward, Activation};
use crate::model::ModelGraph;

/// Placed at the top of every JSON report.
pub const REPORT_NOTE: &str = "Fidelity proxies stand in for task accuracy: mean_rel_err is the mean over inputs \
of ||y_c - y_b||_2 / max(||y_b||_2, 1e-12) on the sink output; top1_agreement is the fraction of inputs whose \
argmax matches; cosine_sim is the mean per-input cosine similarity. Latency and energy are analytic units.";

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub inputs: usize,
    pub mean_rel_err: f64,
    pub top1_agreement: f64,
    pub cosine_sim: f64,
    pub compression_ratio: f64,
    pub latency_units_base: f64,
    pub latency_units_compressed: f64,
    pub energy_units_base: f64,
    pub energy_units_compressed: f64,
    pub es_total: f64,
}

/// Per-input comparison of two output vectors, computed in f64.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputComparison {
    pub rel_err: f64,
    pub same_argmax: bool,
    pub cosine: f64,
}

/// Index of the first maximum.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn compare_outputs(base: &[f32], other: &[f32]) -> OutputComparison {
    let (mut diff, mut nb, mut no, mut dot) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (&b, &o) in base.iter().zip(other) {
        let (b, o) = (b as f64, o as f64);
        diff += (o - b) * (o - b);
        nb += b * b;
        no += o * o;
        dot += b * o;
    }
    let (nb, no) = (nb.sqrt(), no.sqrt());
    let cosine = if nb == 0.0 && no == 0.0 {
        1.0
    } else if nb == 0.0 || no == 0.0 {
        0.0
    } else {
        (dot / (nb * no)).clamp(-1.0, 1.0)
    };
    OutputComparison {
        rel_err: diff.sqrt() / nb.max(NORM_FLOOR),
        same_argmax: argmax(base) == argmax(other),
        cosine,
    }
}

/// Averages per-input comparisons in input order.
pub fn summarize(comparisons: &[OutputComparison]) -> Result<(f64, f64, f64)> {
    if comparisons.is_empty() {
        return Err(UpaqError::Param("evaluation needs at least one input".into()));
    }
    let n = comparisons.len() as f64;
    let rel = comparisons.iter().map(|c| c.rel_err).sum::<f64>() / n;
    let agree = comparisons.iter().filter(|c| c.same_argmax).count() as f64 / n;
    let cos = comparisons.iter().map(|c| c.cosine).sum::<f64>() / n;
    Ok((rel, agree, cos))
}

pub fn check_inputs(expected: [usize; 3], inputs: &[Activation]) -> Result<()> {
    if inputs.is_empty() {
        return Err(UpaqError::Param("evaluation needs at least one input".into()));
    }
    match inputs.iter().position(|x| x.shape() != expected) {
        Some(index) => Err(UpaqError::InputShape {
            index,
            expected,
            got: inputs[index].shape(),
        }),
        None => Ok(()),
    }
}

/// Sink outputs of `base` and `compressed` for every input, in input order.
pub fn run_both(
    base: &ModelGraph,
    compressed: &CompressedModel,
    inputs: &[Activation],
) -> Result<(Vec<Activation>, Vec<Activation>)> {
    check_inputs(base.input_shape, inputs)?;
    if compressed.input_shape != base.input_shape {
        return Err(UpaqError::Param(format!(
            "base expects input {:?}, compressed model expects {:?}",
            base.input_shape, compressed.input_shape
        )));
    }
    let decompressed = compressed.decompress()?;
    let pairs: Vec<(Activation, Activation)> = inputs
        .par_iter()
        .map(|x| Ok((forward(base, x)?, forward(&decompressed, x)?)))
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Analytic cost of `base` at 32 bits and of `compressed` at its chosen bitwidths.
pub fn analytic_costs(base: &ModelGraph, compressed: &CompressedModel) -> Result<(CostEstimate, CostEstimate)> {
    let b = AnalyticCost.estimate(base, &BitAssignment::new())?;
    let c = AnalyticCost.estimate(&compressed.decompress()?, &compressed.bit_assignment())?;
    Ok((b, c))
}

pub fn evaluate_fidelity(
    base: &ModelGraph,
    compressed: &CompressedModel,
    inputs: &[Activation],
) -> Result<FidelityReport> {
    let (yb, yc) = run_both(base, compressed, inputs)?;
    let comparisons: Vec<OutputComparison> = yb
        .iter()
        .zip(&yc)
        .map(|(b, c)| compare_outputs(&b.data, &c.data))
        .collect();
    let (mean_rel_err, top1_agreement, cosine_sim) = summarize(&comparisons)?;
    let (cost_b, cost_c) = analytic_costs(base, compressed)?;
    let es = calculate_es(compressed.mean_sqnr_db(), &cost_c, &cost_b, EsWeights::default())?;
    let report = FidelityReport {
        inputs: inputs.len(),
        mean_rel_err,
        top1_agreement,
        cosine_sim,
        compression_ratio: model_compression_ratio(base, compressed)?,
        latency_units_base: cost_b.latency,
        latency_units_compressed: cost_c.latency,
        energy_units_base: cost_b.energy.unwrap_or(0.0),
        energy_units_compressed: cost_c.energy.unwrap_or(0.0),
        es_total: es.total,
    };
    let fields = [
        report.mean_rel_err,
        report.top1_agreement,
        report.cosine_sim,
        report.compression_ratio,
        report.latency_units_base,
        report.latency_units_compressed,
        report.energy_units_base,
        report.energy_units_compressed,
        report.es_total,
    ];
    if fields.iter().any(|v| !v.is_finite()) {
        return Err(UpaqError::NonFinite("fidelity report".into()));
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport<'a> {
    pub note: &'static str,
    #[serde(flatten)]
    pub fidelity: &'a FidelityReport,
}

/// Summary emitted by `upaq compress`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionReport {
    pub model: String,
    pub profile: String,
    pub seed: u64,
    pub cost_model: String,
    pub candidates: usize,
    pub search: String,
    pub groups: Vec<GroupRecord>,
    pub dense_bytes: usize,
    pub compressed_bytes: usize,
    pub compression_ratio: f64,
    pub computational_cost_base: ComputationalCost,
    pub computational_cost_compressed: ComputationalCost,
    pub latency_units_base: f64,
    pub latency_units_compressed: f64,
    pub energy_units_base: f64,
    pub energy_units_compressed: f64,
}

pub fn compression_report(
    base: &ModelGraph,
    compressed: &CompressedModel,
    profile: &CompressionProfile,
    cost_model: &str,
) -> Result<CompressionReport> {
    let decompressed = compressed.decompress()?;
    let (cost_b, cost_c) = analytic_costs(base, compressed)?;
    Ok(CompressionReport {
        model: base.name.clone(),
        profile: profile.name.clone(),
        seed: profile.seed,
        cost_model: cost_model.to_string(),
        candidates: profile.candidates,
        search: format!("{:?}", profile.search).to_lowercase(),
        groups: compressed.groups.clone(),
        dense_bytes: dense_payload_bytes(base),
        compressed_bytes: compressed.payload_bytes(),
        compression_ratio: model_compression_ratio(base, compressed)?,
        computational_cost_base: computational_cost(base),
        computational_cost_compressed: computational_cost(&decompressed),
        latency_units_base: cost_b.latency,
        latency_units_compressed: cost_c.latency,
        energy_units_base: cost_b.energy.unwrap_or(0.0),
        energy_units_compressed: cost_c.energy.unwrap_or(0.0),
    })
}

/// The [`compress_model`](crate::compressor::compress_model) result with
/// nothing pruned: every conv kept dense at 32 bits. Used as an identity
/// reference in tests.
pub fn lossless_copy(base: &ModelGraph) -> CompressedModel {
    use crate::compressed::{CompressedLayer, LayerWeights};
    CompressedModel {
        name: base.name.clone(),
        input_shape: base.input_shape,
        profile: "identity".into(),
        quant_bits: vec![],
        layers: base
            .layers
            .iter()
            .map(|l| CompressedLayer {
                id: l.id.clone(),
                kind: l.kind,
                inputs: l.inputs.clone(),
                stride: l.stride,
                padding: l.padding,
                bias: l.bias.clone(),
                weights: l.weights.clone().map_or(LayerWeights::None, LayerWeights::Dense),
            })
            .collect(),
        groups: vec![],
    }
}

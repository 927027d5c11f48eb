//! Per-group pattern and bitwidth search.
//!
//! For every root/leaf group the root layer is tried under a set of candidate
//! patterns and every allowed bitwidth. Each candidate is masked, quantized,
//! written into a private copy of the model and scored with the efficiency
//! score. The best candidate is then applied to every member of the group,
//! each member re-quantized with its own per-slice scales.
//!
//! 1x1 layers are flattened and regrouped into `k x k` blocks first so the
//! same patterns apply to them.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compressed::{
    dense_payload_bytes, CompressedLayer, CompressedModel, GroupRecord, LayerWeights, PackedWeights, SliceLayout,
};
use crate::cost::{compression_ratio, BitAssignment, CostEstimate, CostModel};
use crate::error::{Result, UpaqError};
use crate::grouping::{find_root_groups, RootGroup};
use crate::model::{LayerKind, ModelGraph, Tensor4};
use crate::patterns::{apply_pattern, enumerate_all_patterns, generate_pattern, KernelPattern};
use crate::quantizer::{check_bits, dequantize, mp_quantize, QuantResult, SQNR_CAP_DB};

/// Block edge used when regrouping 1x1 weights.
pub const BLOCK_K: usize = 3;

/// dB mapped to a unit SQNR term.
pub const SQNR_DB_UNIT: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for EsWeights {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.4,
            gamma: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyScore {
    pub sqnr_term: f64,
    pub latency_term: f64,
    pub energy_term: f64,
    pub total: f64,
}

/// Weighted sum of a normalized SQNR term and baseline-relative speed and
/// energy gains.
///
/// `sqnr_term = clamp(mean_sqnr_db, 0, 120) / 40`,
/// `latency_term = baseline / candidate` (same for energy). When the cost
/// model cannot observe energy the energy term is zero.
// negated comparisons also reject NaN
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn calculate_es(
    mean_sqnr_db: f64,
    candidate: &CostEstimate,
    baseline: &CostEstimate,
    weights: EsWeights,
) -> Result<EfficiencyScore> {
    if !(baseline.latency > 0.0) {
        return Err(UpaqError::Cost("baseline latency must be positive".into()));
    }
    if !(candidate.latency > 0.0) {
        return Err(UpaqError::Cost("candidate latency is zero".into()));
    }
    if !mean_sqnr_db.is_finite() {
        return Err(UpaqError::NonFinite("mean SQNR".into()));
    }
    let sqnr_term = mean_sqnr_db.clamp(0.0, SQNR_CAP_DB) / SQNR_DB_UNIT;
    let latency_term = baseline.latency / candidate.latency;
    let energy_term = match (baseline.energy, candidate.energy) {
        (Some(b), Some(c)) => {
            if !(b > 0.0) {
                return Err(UpaqError::Cost("baseline energy must be positive".into()));
            }
            if !(c > 0.0) {
                return Err(UpaqError::Cost("candidate energy is zero".into()));
            }
            b / c
        }
        _ => 0.0,
    };
    let total = weights.alpha * sqnr_term + weights.beta * latency_term + weights.gamma * energy_term;
    Ok(EfficiencyScore {
        sqnr_term,
        latency_term,
        energy_term,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// `candidates` patterns drawn from the group's random stream.
    Sampled,
    /// Every distinct pattern, in enumeration order.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionProfile {
    pub name: String,
    /// Nonzeros kept per kernel, keyed by kernel edge `d`.
    pub n_nonzero: BTreeMap<usize, usize>,
    pub quant_bits: Vec<u32>,
    pub candidates: usize,
    pub search: SearchMode,
    pub weights: EsWeights,
    pub seed: u64,
}

impl CompressionProfile {
    /// Aggressive: 2 of 9 weights, 4 or 8 bits.
    pub fn hck(seed: u64) -> Self {
        Self {
            name: "hck".into(),
            n_nonzero: [(3, 2)].into(),
            quant_bits: vec![4, 8],
            candidates: 16,
            search: SearchMode::Sampled,
            weights: EsWeights::default(),
            seed,
        }
    }

    /// Accuracy-leaning: 3 of 9 weights, 8 or 16 bits.
    pub fn lck(seed: u64) -> Self {
        Self {
            name: "lck".into(),
            n_nonzero: [(3, 3)].into(),
            quant_bits: vec![8, 16],
            candidates: 16,
            search: SearchMode::Sampled,
            weights: EsWeights::default(),
            seed,
        }
    }

    pub fn by_name(name: &str, seed: u64) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "hck" => Ok(Self::hck(seed)),
            "lck" => Ok(Self::lck(seed)),
            other => Err(UpaqError::Param(format!(
                "unknown profile '{other}' (expected hck or lck)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(w.alpha) && unit(w.beta) && unit(w.gamma)) || w.alpha + w.beta + w.gamma <= 0.0 {
            return Err(UpaqError::Param(format!(
                "score weights {w:?} must lie in [0,1] with a positive sum"
            )));
        }
        if self.quant_bits.is_empty() {
            return Err(UpaqError::Param("profile has no bitwidths".into()));
        }
        for &b in &self.quant_bits {
            check_bits(b)?;
        }
        if self.candidates == 0 {
            return Err(UpaqError::Param("candidate count must be at least 1".into()));
        }
        for (&d, &n) in &self.n_nonzero {
            if n == 0 || n > d {
                return Err(UpaqError::Param(format!("n_nonzero({d}) = {n} outside [1, {d}]")));
            }
        }
        Ok(())
    }

    /// Nonzeros to keep for kernel edge `d`.
    pub fn n_for(&self, d: usize, layer: &str) -> Result<usize> {
        match self.n_nonzero.get(&d) {
            Some(&n) if n >= 1 && n <= d => Ok(n),
            Some(&n) => Err(self.incompatible(layer, format!("n_nonzero {n} exceeds kernel size {d}"))),
            None => Err(self.incompatible(layer, format!("no nonzero count configured for {d}x{d} kernels"))),
        }
    }

    fn incompatible(&self, layer: &str, msg: String) -> UpaqError {
        UpaqError::Profile {
            profile: self.name.clone(),
            layer: layer.to_string(),
            msg,
        }
    }
}

/// Flattens 1x1 weights in `(out, in)` order and cuts them into row-major
/// `k x k` blocks. The last block is zero-padded.
pub fn blocks_from_1x1(weights: &Tensor4, k: usize) -> Result<Vec<Vec<f32>>> {
    if k < 2 {
        return Err(UpaqError::Param(format!("block size must be at least 2, got {k}")));
    }
    if weights.kh != 1 || weights.kw != 1 {
        return Err(UpaqError::Param(format!(
            "expected 1x1 weights, got {}x{}",
            weights.kh, weights.kw
        )));
    }
    let kk = k * k;
    Ok(weights
        .data
        .chunks(kk)
        .map(|chunk| {
            let mut block = chunk.to_vec();
            block.resize(kk, 0.0);
            block
        })
        .collect())
}

/// Inverse of [`blocks_from_1x1`]: writes back the first `out_ch * in_ch`
/// block entries and drops the padding.
pub fn flatten_blocks_to_1x1(blocks: &[Vec<f32>], k: usize, out_ch: usize, in_ch: usize) -> Result<Tensor4> {
    let count = out_ch * in_ch;
    let kk = k * k;
    if blocks.len() != count.div_ceil(kk) || blocks.iter().any(|b| b.len() != kk) {
        return Err(UpaqError::Param(format!(
            "{} blocks of {k}x{k} cannot hold exactly {count} weights",
            blocks.len()
        )));
    }
    let data: Vec<f32> = blocks.iter().flatten().copied().take(count).collect();
    Tensor4::new(out_ch, in_ch, 1, 1, data)
}

/// One layer masked and quantized under a fixed pattern and bitwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuant {
    pub layout: SliceLayout,
    /// One result per slice or block, over the full masked `d x d` unit.
    pub units: Vec<QuantResult>,
    /// Dequantized weights in the original layer shape.
    pub dense: Tensor4,
    pub mean_sqnr_db: f64,
}

impl LayerQuant {
    pub fn to_packed(&self, pattern: &KernelPattern) -> PackedWeights {
        let mut packed = PackedWeights {
            shape: self.dense.shape(),
            layout: self.layout,
            bitwidth: self.units.first().map_or(8, |u| u.bitwidth),
            pattern: pattern.clone(),
            scales: self.units.iter().map(|u| u.scale).collect(),
            values: Vec::new(),
        };
        let idx = pattern.flat_indices();
        packed.values = self
            .units
            .iter()
            .enumerate()
            .map(|(u, r)| {
                let keep = packed.unit_positions(u).len();
                idx.iter().take(keep).map(|&i| r.q_values[i]).collect()
            })
            .collect();
        packed
    }
}

/// Masks and quantizes every slice (or block) of `weights`.
pub fn quantize_layer(weights: &Tensor4, pattern: &KernelPattern, bits: u32) -> Result<LayerQuant> {
    let (layout, units_in): (SliceLayout, Vec<Vec<f32>>) = if weights.kh == 1 && weights.kw == 1 {
        let k = pattern.d;
        (SliceLayout::Blocks { k }, blocks_from_1x1(weights, k)?)
    } else {
        if weights.kh != weights.kw || weights.kh != pattern.d {
            return Err(UpaqError::Param(format!(
                "{}x{} kernel does not match a {}x{} pattern",
                weights.kh, weights.kw, pattern.d, pattern.d
            )));
        }
        (
            SliceLayout::Kernel,
            (0..weights.slice_count()).map(|s| weights.slice(s).to_vec()).collect(),
        )
    };

    let mut units = Vec::with_capacity(units_in.len());
    let mut recon = Vec::with_capacity(units_in.len());
    for unit in &units_in {
        let masked = apply_pattern(unit, pattern)?;
        let q = mp_quantize(&masked, bits)?;
        recon.push(dequantize(&q.q_values, q.scale));
        units.push(q);
    }
    let dense = match layout {
        SliceLayout::Blocks { k } => flatten_blocks_to_1x1(&recon, k, weights.out_ch, weights.in_ch)?,
        SliceLayout::Kernel => Tensor4::new(
            weights.out_ch,
            weights.in_ch,
            weights.kh,
            weights.kw,
            recon.into_iter().flatten().collect(),
        )?,
    };
    let mean_sqnr_db = if units.is_empty() {
        SQNR_CAP_DB
    } else {
        units.iter().map(|u| u.sqnr_db).sum::<f64>() / units.len() as f64
    };
    Ok(LayerQuant {
        layout,
        units,
        dense,
        mean_sqnr_db,
    })
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub pattern: KernelPattern,
    pub bits: u32,
    pub quant: LayerQuant,
    pub score: EfficiencyScore,
}

/// Scores (pattern, bitwidth) choices for one root layer against a private
/// copy of the model.
pub struct CandidateEvaluator<'a> {
    scratch: ModelGraph,
    root_idx: usize,
    root_weights: Tensor4,
    cost: &'a dyn CostModel,
    baseline: CostEstimate,
    weights: EsWeights,
}

impl<'a> CandidateEvaluator<'a> {
    pub fn new(
        model: &ModelGraph,
        root_id: &str,
        cost: &'a dyn CostModel,
        baseline: CostEstimate,
        weights: EsWeights,
    ) -> Result<Self> {
        let root_idx = model
            .layer_index(root_id)
            .ok_or_else(|| UpaqError::model(format!("unknown root layer '{root_id}'")))?;
        let root_weights = model.layers[root_idx]
            .weights
            .clone()
            .ok_or_else(|| UpaqError::validation(root_id, "root layer has no weights"))?;
        Ok(Self {
            scratch: model.deep_copy(),
            root_idx,
            root_weights,
            cost,
            baseline,
            weights,
        })
    }

    pub fn evaluate(&mut self, pattern: &KernelPattern, bits: u32) -> Result<Candidate> {
        let quant = quantize_layer(&self.root_weights, pattern, bits)?;
        let root = &mut self.scratch.layers[self.root_idx];
        root.weights = Some(quant.dense.clone());
        let assignment: BitAssignment = [(root.id.clone(), bits)].into();
        let estimate = self.cost.estimate(&self.scratch, &assignment)?;
        let score = calculate_es(quant.mean_sqnr_db, &estimate, &self.baseline, self.weights)?;
        Ok(Candidate {
            pattern: pattern.clone(),
            bits,
            quant,
            score,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GroupDecision {
    pub root_id: String,
    pub leaf_ids: Vec<String>,
    pub pattern: KernelPattern,
    pub bitwidth: u32,
    pub mean_sqnr_db: f64,
    pub score: EfficiencyScore,
    /// Root first, then leaves in group order.
    pub layers: Vec<(String, LayerQuant)>,
}

/// Seed of a group's random stream: the first 8 bytes (little-endian) of
/// SHA-256 over the global seed (little-endian) followed by the root id.
pub fn group_seed(seed: u64, root_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(root_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn group_rng(seed: u64, root_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(group_seed(seed, root_id))
}

fn root_weights<'m>(group: &RootGroup, model: &'m ModelGraph) -> Result<&'m Tensor4> {
    model
        .layer(&group.root_id)
        .and_then(|l| l.weights.as_ref())
        .ok_or_else(|| UpaqError::validation(&group.root_id, "root layer has no weights"))
}

/// Search over a `d x d` kernel root (d > 1).
pub fn compress_kxk_group(
    group: &RootGroup,
    model: &ModelGraph,
    profile: &CompressionProfile,
    cost: &dyn CostModel,
    baseline: &CostEstimate,
    rng: &mut ChaCha8Rng,
) -> Result<GroupDecision> {
    let w = root_weights(group, model)?;
    if w.kw <= 1 {
        return Err(UpaqError::Param(format!(
            "layer '{}' has 1x1 kernels; use the 1x1 path",
            group.root_id
        )));
    }
    if w.kh != w.kw {
        return Err(profile.incompatible(&group.root_id, format!("non-square {}x{} kernel", w.kh, w.kw)));
    }
    let n = profile.n_for(w.kw, &group.root_id)?;
    search_group(group, model, profile, cost, baseline, n, w.kw, rng)
}

/// Search over a 1x1 root regrouped into [`BLOCK_K`] x [`BLOCK_K`] blocks.
pub fn compress_1x1_group(
    group: &RootGroup,
    model: &ModelGraph,
    profile: &CompressionProfile,
    cost: &dyn CostModel,
    baseline: &CostEstimate,
    rng: &mut ChaCha8Rng,
) -> Result<GroupDecision> {
    let w = root_weights(group, model)?;
    if w.kh != 1 || w.kw != 1 {
        return Err(UpaqError::Param(format!(
            "layer '{}' is not a 1x1 convolution",
            group.root_id
        )));
    }
    let n = profile.n_for(BLOCK_K, &group.root_id)?;
    search_group(group, model, profile, cost, baseline, n, BLOCK_K, rng)
}

/// Candidate patterns in evaluation order.
pub fn candidate_patterns(
    profile: &CompressionProfile,
    n: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<KernelPattern>> {
    match profile.search {
        SearchMode::Exhaustive => enumerate_all_patterns(n, d),
        SearchMode::Sampled => (0..profile.candidates).map(|_| generate_pattern(n, d, rng)).collect(),
    }
}

#[allow(clippy::too_many_arguments)]
fn search_group(
    group: &RootGroup,
    model: &ModelGraph,
    profile: &CompressionProfile,
    cost: &dyn CostModel,
    baseline: &CostEstimate,
    n: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GroupDecision> {
    let patterns = candidate_patterns(profile, n, d, rng)?;
    let mut evaluator = CandidateEvaluator::new(model, &group.root_id, cost, *baseline, profile.weights)?;

    let mut best: Option<Candidate> = None;
    for pattern in &patterns {
        for &bits in &profile.quant_bits {
            let cand = evaluator.evaluate(pattern, bits)?;
            // strict: the earliest candidate keeps ties
            if best.as_ref().is_none_or(|b| cand.score.total > b.score.total) {
                best = Some(cand);
            }
        }
    }
    let best = best.expect("at least one pattern and one bitwidth");

    let mut layers = Vec::with_capacity(group.len());
    layers.push((group.root_id.clone(), best.quant));
    for leaf in &group.leaf_ids {
        let w = model
            .layer(leaf)
            .and_then(|l| l.weights.as_ref())
            .ok_or_else(|| UpaqError::validation(leaf, "leaf layer has no weights"))?;
        layers.push((leaf.clone(), quantize_layer(w, &best.pattern, best.bits)?));
    }
    Ok(GroupDecision {
        root_id: group.root_id.clone(),
        leaf_ids: group.leaf_ids.clone(),
        mean_sqnr_db: layers[0].1.mean_sqnr_db,
        pattern: best.pattern,
        bitwidth: best.bits,
        score: best.score,
        layers,
    })
}

/// Compresses all groups, searching on roots and replicating to leaves.
pub fn compress_model(
    model: &ModelGraph,
    profile: &CompressionProfile,
    cost: &dyn CostModel,
) -> Result<CompressedModel> {
    compress_model_with_workers(model, profile, cost, 0)
}

/// As [`compress_model`], running group searches on `workers` threads
/// (0 picks the rayon default). Output does not depend on `workers`.
pub fn compress_model_with_workers(
    model: &ModelGraph,
    profile: &CompressionProfile,
    cost: &dyn CostModel,
    workers: usize,
) -> Result<CompressedModel> {
    model.validate()?;
    profile.validate()?;
    let base = model.deep_copy();
    let groups = find_root_groups(&base);
    let baseline = cost.estimate(&base, &BitAssignment::new())?;

    let search = |group: &RootGroup| -> Result<GroupDecision> {
        let mut rng = group_rng(profile.seed, &group.root_id);
        let w = root_weights(group, &base)?;
        if w.kw > 1 {
            compress_kxk_group(group, &base, profile, cost, &baseline, &mut rng)
        } else {
            compress_1x1_group(group, &base, profile, cost, &baseline, &mut rng)
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| UpaqError::Param(format!("cannot start worker pool: {e}")))?;
    let decisions: Vec<GroupDecision> = pool.install(|| groups.par_iter().map(search).collect::<Result<_>>())?;

    assemble(&base, profile, decisions)
}

/// Dense weight and bias bytes of `base` over the blob bytes of `compressed`.
pub fn model_compression_ratio(base: &ModelGraph, compressed: &CompressedModel) -> Result<f64> {
    compression_ratio(dense_payload_bytes(base), compressed.payload_bytes())
}

fn assemble(base: &ModelGraph, profile: &CompressionProfile, decisions: Vec<GroupDecision>) -> Result<CompressedModel> {
    let mut packed: BTreeMap<String, PackedWeights> = BTreeMap::new();
    let mut groups = Vec::with_capacity(decisions.len());
    for decision in decisions {
        for (id, quant) in &decision.layers {
            packed.insert(id.clone(), quant.to_packed(&decision.pattern));
        }
        groups.push(GroupRecord {
            root_id: decision.root_id,
            leaf_ids: decision.leaf_ids,
            pattern: decision.pattern,
            bitwidth: decision.bitwidth,
            mean_sqnr_db: decision.mean_sqnr_db,
            score: decision.score,
        });
    }
    let layers = base
        .layers
        .iter()
        .map(|l| CompressedLayer {
            id: l.id.clone(),
            kind: l.kind,
            inputs: l.inputs.clone(),
            stride: l.stride,
            padding: l.padding,
            bias: l.bias.clone(),
            weights: match (packed.remove(&l.id), &l.weights) {
                (Some(p), _) => LayerWeights::Packed(p),
                (None, Some(w)) => {
                    debug_assert_ne!(l.kind, LayerKind::Conv2d);
                    LayerWeights::Dense(w.clone())
                }
                (None, None) => LayerWeights::None,
            },
        })
        .collect();
    let model = CompressedModel {
        name: base.name.clone(),
        input_shape: base.input_shape,
        profile: profile.name.clone(),
        quant_bits: profile.quant_bits.clone(),
        layers,
        groups,
    };
    model.validate()?;
    Ok(model)
}

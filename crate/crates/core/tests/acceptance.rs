//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line; exits nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use upaq::compressed::{dense_payload_bytes, CompressedModel, LayerWeights};
use upaq::compressor::{
    blocks_from_1x1, compress_model, flatten_blocks_to_1x1, model_compression_ratio, CandidateEvaluator,
    CompressionProfile, EsWeights, SearchMode,
};
use upaq::cost::{computational_cost, cost_product, AnalyticCost, BitAssignment, CostModel};
use upaq::format::{blob_len, compressed_to_bytes};
use upaq::harness::{evaluate_fidelity, gen_fixture, FixtureArch};
use upaq::model::{LayerSpec, ModelGraph, Tensor4};
use upaq::patterns::{apply_pattern, enumerate_all_patterns, generate_pattern, KernelPattern};
use upaq::quantizer::mp_quantize;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:?}, budget {limit:?}"))
}

// ---------------------------------------------------------------- patterns

/// Number of distinct cell sets reachable for `n` of `d`.
fn closed_form_count(n: usize, d: usize) -> usize {
    if n == 1 {
        d * d
    } else {
        2 + 2 * d * (d - n + 1)
    }
}

/// Independent check that `cells` is a contiguous length-n segment of a row,
/// a column, the main diagonal from the top-left or the anti-diagonal from
/// the top-right.
fn is_valid_segment(cells: &[(usize, usize)], n: usize, d: usize) -> bool {
    let mut cells = cells.to_vec();
    cells.sort_unstable();
    let distinct: BTreeSet<_> = cells.iter().collect();
    if cells.len() != n || distinct.len() != n || cells.iter().any(|&(r, c)| r >= d || c >= d) {
        return false;
    }
    let main: Vec<_> = (0..n).map(|i| (i, i)).collect();
    let anti: Vec<_> = (0..n).map(|i| (i, d - 1 - i)).collect();
    let (r0, c0) = cells[0];
    let row: Vec<_> = (0..n).map(|i| (r0, c0 + i)).collect();
    let col: Vec<_> = (0..n).map(|i| (r0 + i, c0)).collect();
    [main, anti, row, col].iter().any(|shape| {
        let mut s = shape.clone();
        s.sort_unstable();
        s == cells
    })
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut draws = 0;
    for d in 1..=7 {
        for n in 1..=d {
            let all = enumerate_all_patterns(n, d).map_err(|e| e.to_string())?;
            ensure(all.len() == closed_form_count(n, d), || {
                format!(
                    "n={n} d={d}: enumerated {} patterns, closed form {}",
                    all.len(),
                    closed_form_count(n, d)
                )
            })?;
            let sets: BTreeSet<Vec<usize>> = all.iter().map(KernelPattern::flat_indices).collect();
            ensure(sets.len() == all.len(), || format!("n={n} d={d}: duplicate cell sets"))?;
            for seed in 0..1000u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = generate_pattern(n, d, &mut rng).map_err(|e| e.to_string())?;
                draws += 1;
                ensure(p.check().is_ok() && is_valid_segment(&p.positions, n, d), || {
                    format!("n={n} d={d} seed={seed}: invalid pattern {:?}", p.positions)
                })?;
                ensure(sets.contains(&p.flat_indices()), || {
                    format!("n={n} d={d} seed={seed}: pattern not in enumeration")
                })?;
            }
        }
    }
    ensure(closed_form_count(3, 3) == 8 && closed_form_count(2, 3) == 14, || {
        "closed form examples".into()
    })?;
    within(Duration::from_secs(10), start)?;
    Ok(format!(
        "{draws} draws valid; counts match closed form (8 for 3/3, 14 for 2/3)"
    ))
}

// --------------------------------------------------------------- quantizer

fn pop_var(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_margin = f64::INFINITY;
    for bits in [4u32, 8, 16] {
        for _ in 0..10_000 {
            let len = rng.gen_range(1..=16);
            let mag: f32 = 10f32.powf(rng.gen_range(-2.0..0.0));
            let x: Vec<f32> = (0..len).map(|_| rng.gen_range(-1.0f32..1.0) * mag).collect();
            let q = mp_quantize(&x, bits).map_err(|e| e.to_string())?;
            let xh = q.dequantized();
            let half = q.scale as f64 / 2.0;
            for (a, b) in x.iter().zip(&xh) {
                let err = (*a as f64 - *b as f64).abs();
                worst_margin = worst_margin.min(half + 1e-7 - err);
                ensure(err <= half + 1e-7, || {
                    format!("{bits}-bit: |x - x^| = {err} > scale/2 + 1e-7 for {x:?}")
                })?;
            }
            let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let bound = pop_var(&xs) / (half * half);
            ensure(q.sqnr_linear >= bound * (1.0 - 1e-9), || {
                format!("{bits}-bit: sqnr {} below bound {bound} for {x:?}", q.sqnr_linear)
            })?;
            let neg: Vec<f32> = x.iter().map(|v| -v).collect();
            let qn = mp_quantize(&neg, bits).map_err(|e| e.to_string())?;
            let flipped: Vec<i32> = q.q_values.iter().map(|v| -v).collect();
            ensure(
                qn.q_values == flipped && qn.scale == q.scale && qn.sqnr_linear == q.sqnr_linear,
                || format!("{bits}-bit: negation asymmetry for {x:?}"),
            )?;
        }
    }
    let oracle: serde_json::Value =
        serde_json::from_str(include_str!("data/quantize_worked_example.json")).map_err(|e| e.to_string())?;
    let expected: Vec<i32> = oracle["q_values"]
        .as_array()
        .ok_or("oracle file has no q_values")?
        .iter()
        .map(|v| v.as_i64().unwrap_or(i64::MAX) as i32)
        .collect();
    let worked = mp_quantize(&[1.0, -2.0, 0.5, 0.0], 8).map_err(|e| e.to_string())?;
    ensure(worked.q_values == expected && expected == [64, -127, 32, 0], || {
        format!("worked example gave {:?}, oracle {expected:?}", worked.q_values)
    })?;
    ensure(
        worked.scale as f64 == oracle["scale"].as_f64().unwrap_or(f64::NAN),
        || "worked example scale".into(),
    )?;
    within(Duration::from_secs(10), start)?;
    Ok(format!(
        "3 x 10^4 slices within scale/2 + 1e-7 (min slack {worst_margin:.3e}); worked example {expected:?}"
    ))
}

// ---------------------------------------------------------- oracle search

fn single_conv_model(seed: u64) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f32> = (0..4 * 2 * 9).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let b: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let conv = LayerSpec::conv2d("conv", Tensor4::new(4, 2, 3, 3, w).unwrap(), Some(b), 1, 1, &[]);
    ModelGraph::new("single", [2, 8, 8], vec![conv]).unwrap()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let model = single_conv_model(42);
    let mut summary = Vec::new();
    for n in [2usize, 3] {
        let profile = CompressionProfile {
            name: "custom".into(),
            n_nonzero: [(3, n)].into(),
            quant_bits: vec![4, 8, 16],
            candidates: 1,
            search: SearchMode::Exhaustive,
            weights: EsWeights::default(),
            seed: 42,
        };
        let out = compress_model(&model, &profile, &AnalyticCost).map_err(|e| e.to_string())?;
        ensure(out.groups.len() == 1, || {
            format!("expected one group, got {}", out.groups.len())
        })?;
        let got = &out.groups[0];

        // brute force: every distinct cell set, every bitwidth, strict > keeps the first maximum
        let baseline = AnalyticCost
            .estimate(&model, &BitAssignment::new())
            .map_err(|e| e.to_string())?;
        let mut eval = CandidateEvaluator::new(&model, "conv", &AnalyticCost, baseline, EsWeights::default())
            .map_err(|e| e.to_string())?;
        let mut best: Option<(KernelPattern, u32, f64)> = None;
        let mut seen = BTreeSet::new();
        for pattern in enumerate_all_patterns(n, 3).map_err(|e| e.to_string())? {
            if !seen.insert(pattern.flat_indices()) {
                continue;
            }
            for bits in [4, 8, 16] {
                let c = eval.evaluate(&pattern, bits).map_err(|e| e.to_string())?;
                if best.as_ref().is_none_or(|b| c.score.total > b.2) {
                    best = Some((pattern.clone(), bits, c.score.total));
                }
            }
        }
        let (p, bits, es) = best.ok_or("oracle found no candidate")?;
        ensure(got.pattern == p && got.bitwidth == bits, || {
            format!(
                "n={n}: search chose {:?}/{} bits, oracle {:?}/{bits}",
                got.pattern.positions, got.bitwidth, p.positions
            )
        })?;
        ensure(got.score.total.to_bits() == es.to_bits(), || {
            format!("n={n}: E_s {} differs from oracle {es}", got.score.total)
        })?;
        summary.push(format!("n={n}: {:?} {}-bit E_s={es:.6}", p.kind, bits));
    }
    within(Duration::from_secs(30), start)?;
    Ok(summary.join("; "))
}

// ----------------------------------------------------------- structure

fn criterion_4() -> Outcome {
    let (model, _) = gen_fixture(FixtureArch::ToyResidual, 42).map_err(|e| e.to_string())?;
    let out = compress_model(&model, &CompressionProfile::hck(42), &AnalyticCost).map_err(|e| e.to_string())?;
    ensure(out.groups.len() == 1, || format!("{} groups", out.groups.len()))?;
    let g = &out.groups[0];
    ensure(g.root_id == "conv_a" && g.leaf_ids == ["conv_b", "conv_c"], || {
        format!("group {} -> {:?}", g.root_id, g.leaf_ids)
    })?;
    ensure([4, 8].contains(&g.bitwidth), || format!("bitwidth {}", g.bitwidth))?;
    let dense = out.decompress().map_err(|e| e.to_string())?;
    let mask = g.pattern.mask();
    let mut slices = 0;
    let mut rounded_away = 0;
    for id in ["conv_a", "conv_b", "conv_c"] {
        let p = out.packed(id).ok_or_else(|| format!("{id} not packed"))?;
        ensure(p.pattern == g.pattern && p.bitwidth == g.bitwidth, || {
            format!("{id} differs from its group")
        })?;
        let w = dense
            .layer(id)
            .and_then(|l| l.weights.as_ref())
            .ok_or("missing weights")?;
        for s in 0..w.slice_count() {
            slices += 1;
            ensure(p.values[s].len() == 2 && p.unit_positions(s).len() == 2, || {
                format!("{id} slice {s} stores {} values", p.values[s].len())
            })?;
            let slice = w.slice(s);
            ensure(slice.iter().zip(&mask).all(|(v, keep)| *keep || *v == 0.0), || {
                format!("{id} slice {s} has a nonzero outside the pattern")
            })?;
            // a retained weight below half a quantization step rounds to zero
            let nz = slice.iter().filter(|v| **v != 0.0).count();
            ensure(nz <= 2, || format!("{id} slice {s} has {nz} nonzeros"))?;
            if nz < 2 {
                rounded_away += 2 - nz;
            }
        }
    }
    Ok(format!(
        "group conv_a -> [conv_b, conv_c], {:?} at {} bits, {slices} slices keep exactly 2 pattern positions \
         ({rounded_away} retained weight(s) quantized to 0)",
        g.pattern.kind, g.bitwidth
    ))
}

// -------------------------------------------------------------- ratio

/// Blob size counted from the model structure alone.
fn recount_bytes(c: &CompressedModel) -> usize {
    let masks: usize = c.groups.iter().map(|g| (g.pattern.d * g.pattern.d).div_ceil(8)).sum();
    let layers: usize = c
        .layers
        .iter()
        .map(|l| {
            4 * l.bias.as_ref().map_or(0, Vec::len)
                + match &l.weights {
                    LayerWeights::None => 0,
                    LayerWeights::Dense(t) => 4 * t.data.len(),
                    LayerWeights::Packed(p) => {
                        4 * p.scales.len()
                            + p.values
                                .iter()
                                .map(|v| (v.len() * p.bitwidth as usize).div_ceil(8))
                                .sum::<usize>()
                    }
                }
        })
        .sum();
    masks + layers
}

fn criterion_5() -> Outcome {
    let (model, _) = gen_fixture(FixtureArch::ToyCnn, 42).map_err(|e| e.to_string())?;
    let dense_bytes = 4 * model
        .layers
        .iter()
        .map(|l| l.weights.as_ref().map_or(0, |w| w.data.len()) + l.bias.as_ref().map_or(0, Vec::len))
        .sum::<usize>();
    ensure(dense_bytes == dense_payload_bytes(&model), || {
        "dense byte count disagrees".into()
    })?;
    let mut parts = Vec::new();
    for (profile, floor) in [(CompressionProfile::hck(42), 4.0), (CompressionProfile::lck(42), 2.0)] {
        let c = compress_model(&model, &profile, &AnalyticCost).map_err(|e| e.to_string())?;
        let ratio = model_compression_ratio(&model, &c).map_err(|e| e.to_string())?;
        let recount = recount_bytes(&c);
        let file = compressed_to_bytes(&c).map_err(|e| e.to_string())?;
        let on_disk = blob_len(&file).map_err(|e| e.to_string())?;
        ensure(recount == on_disk && recount == c.payload_bytes(), || {
            format!(
                "{}: recount {recount}, file blob {on_disk}, library {}",
                profile.name,
                c.payload_bytes()
            )
        })?;
        ensure(ratio == dense_bytes as f64 / recount as f64, || {
            format!("{}: ratio {ratio} differs from recount", profile.name)
        })?;
        ensure(ratio >= floor, || {
            format!("{}: ratio {ratio:.3} < {floor}", profile.name)
        })?;
        parts.push(format!("{} {ratio:.3}x ({dense_bytes}/{recount} B)", profile.name));
    }
    Ok(parts.join(", "))
}

// --------------------------------------------------------------- cost

fn criterion_6() -> Outcome {
    ensure(cost_product(2.0, 4.0, 5.0) == 40.0, || "product form".into())?;
    // two conv layers, 4 kernels each, 5 nonzeros per kernel
    let slice = [1.0f32, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let a = Tensor4::new(4, 1, 3, 3, slice.repeat(4)).unwrap();
    let b = Tensor4::new(4, 4, 3, 3, slice.repeat(16)).unwrap();
    let model = ModelGraph::new(
        "cost",
        [1, 6, 6],
        vec![
            LayerSpec::conv2d("a", a, None, 1, 1, &[]),
            LayerSpec::conv2d("b", b, None, 1, 1, &["a"]),
        ],
    )
    .map_err(|e| e.to_string())?;
    let cc = computational_cost(&model);
    ensure(
        cc.conv_layers == 2 && cc.mean_kernels == 10.0 && cc.mean_nonzero_per_kernel == 5.0,
        || format!("{cc:?}"),
    )?;
    ensure(cc.product == 2.0 * 10.0 * 5.0 && cc.exact_nonzero == 100, || {
        format!("{cc:?}")
    })?;

    let full = model;
    let six = [1.0f32, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
    let three = [1.0f32, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let build = |s: &[f32; 9]| {
        ModelGraph::new(
            "h",
            [1, 6, 6],
            vec![
                LayerSpec::conv2d("a", Tensor4::new(4, 1, 3, 3, s.repeat(4)).unwrap(), None, 1, 1, &[]),
                LayerSpec::conv2d("b", Tensor4::new(4, 4, 3, 3, s.repeat(16)).unwrap(), None, 1, 1, &["a"]),
            ],
        )
        .unwrap()
    };
    let none = BitAssignment::new();
    let l6 = AnalyticCost
        .estimate(&build(&six), &none)
        .map_err(|e| e.to_string())?
        .latency;
    let l3 = AnalyticCost
        .estimate(&build(&three), &none)
        .map_err(|e| e.to_string())?
        .latency;
    ensure(l3 * 2.0 == l6, || format!("halving nnz: {l6} -> {l3}"))?;
    let l32 = AnalyticCost.estimate(&full, &none).map_err(|e| e.to_string())?.latency;
    let eight: BitAssignment = [("a".to_string(), 8), ("b".to_string(), 8)].into();
    let l8 = AnalyticCost.estimate(&full, &eight).map_err(|e| e.to_string())?.latency;
    ensure(l8 / l32 == 0.25, || format!("8/32 factor {}", l8 / l32))?;
    Ok(format!(
        "C(2,4,5)=40; latency {l6} -> {l3} when nnz halves; 8-bit/32-bit = {}",
        l8 / l32
    ))
}

// ------------------------------------------------------------ fidelity

fn criterion_7() -> Outcome {
    let (model, inputs) = gen_fixture(FixtureArch::ToyCnn, 42).map_err(|e| e.to_string())?;
    ensure(inputs.len() == 64, || format!("{} inputs", inputs.len()))?;
    let run = |p: CompressionProfile| {
        let c = compress_model(&model, &p, &AnalyticCost).map_err(|e| e.to_string())?;
        evaluate_fidelity(&model, &c, &inputs).map_err(|e| e.to_string())
    };
    let h = run(CompressionProfile::hck(42))?;
    let l = run(CompressionProfile::lck(42))?;
    let detail = format!(
        "rel_err lck {:.4} vs hck {:.4}; top1 lck {:.4} vs hck {:.4}",
        l.mean_rel_err, h.mean_rel_err, l.top1_agreement, h.top1_agreement
    );
    ensure(
        l.mean_rel_err <= h.mean_rel_err && l.top1_agreement >= h.top1_agreement,
        || detail.clone(),
    )?;
    Ok(detail)
}

// --------------------------------------------------------- determinism

fn sha256_file(path: &Path) -> Result<String, String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_upaq"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("upaq {args:?}: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let mut checked = 0;
    for arch in ["toy-cnn", "toy-residual", "toy-1x1"] {
        let model = p(&format!("{arch}.upaq"));
        cli(&["gen-fixture", "--arch", arch, "--seed", "42", "-o", &model])?;
        for profile in ["hck", "lck"] {
            let mut hashes = Vec::new();
            for workers in ["1", "4"] {
                let out = p(&format!("{arch}-{profile}-{workers}.upaqc"));
                let report = p(&format!("{arch}-{profile}-{workers}.json"));
                cli(&[
                    "compress",
                    "--profile",
                    profile,
                    "--patterns",
                    "16",
                    "--seed",
                    "42",
                    "--cost",
                    "analytic",
                    "--workers",
                    workers,
                    &model,
                    "-o",
                    &out,
                    "--report",
                    &report,
                ])?;
                hashes.push(sha256_file(Path::new(&out))?);
            }
            ensure(hashes[0] == hashes[1], || {
                format!("{arch}/{profile}: {} != {}", hashes[0], hashes[1])
            })?;
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} fixture/profile pairs byte-identical with 1 and 4 workers"
    ))
}

// -------------------------------------------------------------- 1x1

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let patterns = enumerate_all_patterns(2, 3).unwrap();
    let mut remainders = 0;
    for t in 0..1000 {
        let (o, i) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let len = o * i;
        if len % 9 != 0 {
            remainders += 1;
        }
        let w = Tensor4::new(o, i, 1, 1, (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let blocks = blocks_from_1x1(&w, 3).map_err(|e| e.to_string())?;
        ensure(blocks.len() == len.div_ceil(9), || {
            format!("tensor {t}: {} blocks for {len} weights", blocks.len())
        })?;
        for (k, v) in w.data.iter().enumerate() {
            ensure(blocks[k / 9][k % 9].to_bits() == v.to_bits(), || {
                format!("tensor {t}: weight {k} misplaced")
            })?;
        }
        ensure(
            blocks.last().unwrap()[len - 9 * (blocks.len() - 1)..]
                .iter()
                .all(|v| *v == 0.0),
            || format!("tensor {t}: padding not zero"),
        )?;
        let back = flatten_blocks_to_1x1(&blocks, 3, o, i).map_err(|e| e.to_string())?;
        ensure(back == w, || format!("tensor {t}: round trip differs"))?;

        let pattern = &patterns[rng.gen_range(0..patterns.len())];
        let keep: BTreeSet<usize> = pattern.positions.iter().map(|&(r, c)| r * 3 + c).collect();
        let pruned: Vec<Vec<f32>> = blocks.iter().map(|b| apply_pattern(b, pattern).unwrap()).collect();
        let flat = flatten_blocks_to_1x1(&pruned, 3, o, i).map_err(|e| e.to_string())?;
        ensure(flat.data.len() == len, || {
            format!("tensor {t}: length {}", flat.data.len())
        })?;
        for k in 0..len {
            let expect = if keep.contains(&(k % 9)) { w.data[k] } else { 0.0 };
            ensure(flat.data[k].to_bits() == expect.to_bits(), || {
                format!("tensor {t}: flat index {k} mapped wrong")
            })?;
        }
    }
    Ok(format!(
        "1000 tensors round-trip exactly ({remainders} with a partial block); pruned positions match k mod 9"
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("pattern suite", criterion_1),
        ("quantizer suite", criterion_2),
        ("oracle equivalence", criterion_3),
        ("structural invariants", criterion_4),
        ("compression ratio", criterion_5),
        ("cost model", criterion_6),
        ("fidelity ordering", criterion_7),
        ("determinism", criterion_8),
        ("1x1 transformation", criterion_9),
    ];
    let suite = Instant::now();
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({took:.2}s) {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({took:.2}s) {detail}", k + 1);
            }
        }
    }
    let total = suite.elapsed();
    println!(
        "acceptance: {} passed, {failed} failed in {:.2}s",
        criteria.len() - failed,
        total.as_secs_f64()
    );
    if failed > 0 || total > Duration::from_secs(300) {
        std::process::exit(1);
    }
}

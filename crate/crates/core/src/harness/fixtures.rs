//! Small seeded models for tests, demos and the evaluator.

use std::f32::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, UpaqError};
use crate::inference::Activation;
use crate::model::{LayerKind, LayerSpec, ModelGraph, Shape3, Tensor4};

/// Inputs generated alongside every fixture.
pub const FIXTURE_INPUTS: usize = 64;

pub const FIXTURE_INPUT_SHAPE: Shape3 = [1, 16, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureArch {
    /// conv3x3 -> relu -> conv3x3 -> conv3x3 -> gap -> linear
    ToyCnn,
    /// conv3x3 -> relu -> {conv3x3, conv3x3} -> add -> gap -> linear
    ToyResidual,
    /// conv3x3 -> relu -> conv1x1 (9 -> 2) -> gap -> linear
    Toy1x1,
}

impl FixtureArch {
    pub const ALL: [FixtureArch; 3] = [FixtureArch::ToyCnn, FixtureArch::ToyResidual, FixtureArch::Toy1x1];

    pub fn name(self) -> &'static str {
        match self {
            FixtureArch::ToyCnn => "toy-cnn",
            FixtureArch::ToyResidual => "toy-residual",
            FixtureArch::Toy1x1 => "toy-1x1",
        }
    }
}

impl fmt::Display for FixtureArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FixtureArch {
    type Err = UpaqError;

    fn from_str(s: &str) -> Result<Self> {
        FixtureArch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| UpaqError::Param(format!("unknown fixture architecture '{s}'")))
    }
}

struct Init(ChaCha8Rng);

impl Init {
    fn values(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.0.gen_range(-1.0f32..1.0)).collect()
    }

    fn conv(&mut self, id: &str, out: usize, inp: usize, k: usize, inputs: &[&str]) -> Result<LayerSpec> {
        let w = Tensor4::new(out, inp, k, k, self.values(out * inp * k * k))?;
        let b = self.values(out);
        Ok(LayerSpec::conv2d(id, w, Some(b), 1, k / 2, inputs))
    }

    fn linear(&mut self, id: &str, out: usize, inp: usize, input: &str) -> Result<LayerSpec> {
        let w = Tensor4::new(out, inp, 1, 1, self.values(out * inp))?;
        let b = self.values(out);
        Ok(LayerSpec::linear(id, w, Some(b), input))
    }
}

/// Deterministic model with weights and biases drawn from uniform(-1, 1).
pub fn fixture_model(arch: FixtureArch, seed: u64) -> Result<ModelGraph> {
    let mut init = Init(ChaCha8Rng::seed_from_u64(seed));
    let relu = |id: &str, input: &str| LayerSpec::op(id, LayerKind::Relu, &[input]);
    let gap = |input: &str| LayerSpec::op("gap", LayerKind::GlobalAvgPool, &[input]);
    let layers = match arch {
        FixtureArch::ToyCnn => vec![
            init.conv("conv1", 8, 1, 3, &[])?,
            relu("relu1", "conv1"),
            init.conv("conv2", 16, 8, 3, &["relu1"])?,
            init.conv("conv3", 16, 16, 3, &["conv2"])?,
            gap("conv3"),
            init.linear("fc", 10, 16, "gap")?,
        ],
        FixtureArch::ToyResidual => vec![
            init.conv("conv_a", 8, 1, 3, &[])?,
            relu("relu_a", "conv_a"),
            init.conv("conv_b", 8, 8, 3, &["relu_a"])?,
            init.conv("conv_c", 8, 8, 3, &["relu_a"])?,
            LayerSpec::op("sum", LayerKind::Add, &["conv_b", "conv_c"]),
            gap("sum"),
            init.linear("fc", 10, 8, "gap")?,
        ],
        FixtureArch::Toy1x1 => vec![
            init.conv("conv3x3", 9, 1, 3, &[])?,
            relu("relu", "conv3x3"),
            init.conv("conv1x1", 2, 9, 1, &["relu"])?,
            gap("conv1x1"),
            init.linear("fc", 4, 2, "gap")?,
        ],
    };
    ModelGraph::new(arch.name(), FIXTURE_INPUT_SHAPE, layers)
}

/// [`FIXTURE_INPUTS`] inputs from stream 1 of the seed.
///
/// Each input is a DC offset plus an oriented sinusoidal grating plus a
/// little uniform noise, so pooled outputs differ from input to input.
/// Pure iid noise would average out under global pooling.
pub fn fixture_inputs(seed: u64, shape: Shape3) -> Vec<Activation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let [c, h, w] = shape;
    (0..FIXTURE_INPUTS)
        .map(|_| {
            let offset: f32 = rng.gen_range(-1.0..1.0);
            let amp: f32 = rng.gen_range(0.0..1.0);
            let fy = rng.gen_range(-3i32..=3) as f32;
            let fx = rng.gen_range(-3i32..=3) as f32;
            let phase: f32 = rng.gen_range(0.0..TAU);
            let mut data = Vec::with_capacity(c * h * w);
            for _ in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let t = TAU * (fy * y as f32 / h as f32 + fx * x as f32 / w as f32) + phase;
                        let noise: f32 = rng.gen_range(-1.0..1.0);
                        data.push(offset + amp * t.sin() + 0.1 * noise);
                    }
                }
            }
            Activation {
                channels: c,
                height: h,
                width: w,
                data,
            }
        })
        .collect()
}

pub fn gen_fixture(arch: FixtureArch, seed: u64) -> Result<(ModelGraph, Vec<Activation>)> {
    let model = fixture_model(arch, seed)?;
    let inputs = fixture_inputs(seed, model.input_shape);
    Ok((model, inputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::find_root_groups;

    #[test]
    fn deterministic() {
        let (a, xa) = gen_fixture(FixtureArch::ToyCnn, 42).unwrap();
        let (b, xb) = gen_fixture(FixtureArch::ToyCnn, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(xa, xb);
        assert_eq!(xa.len(), 64);
        assert_ne!(a, fixture_model(FixtureArch::ToyCnn, 43).unwrap());
    }

    #[test]
    fn shapes() {
        let m = fixture_model(FixtureArch::ToyCnn, 42).unwrap();
        assert_eq!(m.layers.len(), 6);
        assert_eq!(m.input_shape, [1, 16, 16]);
        let m = fixture_model(FixtureArch::Toy1x1, 42).unwrap();
        assert_eq!(m.layer("conv1x1").unwrap().weights.as_ref().unwrap().len(), 18);
    }

    #[test]
    fn residual_grouping() {
        let m = fixture_model(FixtureArch::ToyResidual, 42).unwrap();
        let g = find_root_groups(&m);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].root_id, "conv_a");
        assert_eq!(g[0].leaf_ids, vec!["conv_b", "conv_c"]);
    }

    #[test]
    fn parse_arch() {
        assert_eq!("toy-1x1".parse::<FixtureArch>().unwrap(), FixtureArch::Toy1x1);
        assert!("toy-vgg".parse::<FixtureArch>().is_err());
    }
}

//! Direct-convolution forward pass.
//!
//! Loops run in a fixed order (output channel, output row, output column,
//! input channel, kernel row, kernel column) and accumulate in f32, so a
//! given model and input always produce the same bits on one platform.

use serde::{Deserialize, Serialize};

use crate::compressed::CompressedModel;
use crate::error::{Result, UpaqError};
use crate::model::{LayerKind, LayerSpec, ModelGraph, Shape3, Tensor4};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Activation {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(UpaqError::Param(format!(
                "activation data length {} != {channels}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(UpaqError::NonFinite("activation".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            channels: shape[0],
            height: shape[1],
            width: shape[2],
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> Shape3 {
        [self.channels, self.height, self.width]
    }

    #[inline]
    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// How convolution weights are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvPath {
    /// Every weight, zero or not.
    Dense,
    /// Only nonzero weights, in the same order as `Dense`.
    SkipZeros,
}

pub fn forward(model: &ModelGraph, input: &Activation) -> Result<Activation> {
    forward_with(model, input, ConvPath::Dense)
}

/// Runs the compressed model on its dequantized weights.
pub fn forward_compressed(model: &CompressedModel, input: &Activation) -> Result<Activation> {
    forward(&model.decompress()?, input)
}

/// Same as [`forward_compressed`] but skips pruned positions.
pub fn forward_compressed_sparse(model: &CompressedModel, input: &Activation) -> Result<Activation> {
    forward_with(&model.decompress()?, input, ConvPath::SkipZeros)
}

pub fn forward_with(model: &ModelGraph, input: &Activation, path: ConvPath) -> Result<Activation> {
    if input.shape() != model.input_shape {
        return Err(UpaqError::Shape {
            layer: "<input>".into(),
            msg: format!("expected {:?}, got {:?}", model.input_shape, input.shape()),
        });
    }
    let mut outputs: Vec<Activation> = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let arg = |k: usize| -> Result<&Activation> {
            match layer.inputs.get(k) {
                None => Ok(input),
                Some(id) => {
                    let idx = model
                        .layer_index(id)
                        .filter(|&i| i < outputs.len())
                        .ok_or_else(|| UpaqError::validation(&layer.id, format!("unknown input '{id}'")))?;
                    Ok(&outputs[idx])
                }
            }
        };
        let out = match layer.kind {
            LayerKind::Conv2d => conv2d(layer, arg(0)?, path)?,
            LayerKind::Relu => {
                let x = arg(0)?;
                Activation {
                    data: x.data.iter().map(|v| v.max(0.0)).collect(),
                    ..*x
                }
            }
            LayerKind::Add => {
                let (a, b) = (arg(0)?, arg(1)?);
                if a.shape() != b.shape() {
                    return Err(UpaqError::Shape {
                        layer: layer.id.clone(),
                        msg: format!("add operands differ: {:?} vs {:?}", a.shape(), b.shape()),
                    });
                }
                Activation {
                    data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
                    ..*a
                }
            }
            LayerKind::GlobalAvgPool => {
                let x = arg(0)?;
                let hw = x.height * x.width;
                let data = x
                    .data
                    .chunks(hw)
                    .map(|plane| plane.iter().fold(0.0f32, |s, v| s + v) / hw as f32)
                    .collect();
                Activation {
                    channels: x.channels,
                    height: 1,
                    width: 1,
                    data,
                }
            }
            LayerKind::Linear => linear(layer, arg(0)?)?,
        };
        outputs.push(out);
    }
    Ok(outputs.pop().expect("validated model has layers"))
}

fn weights(layer: &LayerSpec) -> Result<&Tensor4> {
    layer
        .weights
        .as_ref()
        .ok_or_else(|| UpaqError::validation(&layer.id, "missing weights"))
}

fn conv2d(layer: &LayerSpec, x: &Activation, path: ConvPath) -> Result<Activation> {
    let w = weights(layer)?;
    if w.in_ch != x.channels {
        return Err(UpaqError::Shape {
            layer: layer.id.clone(),
            msg: format!("expects {} input channels, got {}", w.in_ch, x.channels),
        });
    }
    let (stride, pad) = (layer.stride, layer.padding);
    let ph = x.height + 2 * pad;
    let pw = x.width + 2 * pad;
    if ph < w.kh || pw < w.kw || stride == 0 {
        return Err(UpaqError::Shape {
            layer: layer.id.clone(),
            msg: "kernel does not fit the padded input".into(),
        });
    }
    let oh = (ph - w.kh) / stride + 1;
    let ow = (pw - w.kw) / stride + 1;

    // (in, r, c, weight) taps per output channel in loop order.
    let taps: Vec<Vec<(usize, usize, usize, f32)>> = (0..w.out_ch)
        .map(|o| {
            let mut t = Vec::new();
            for i in 0..w.in_ch {
                for r in 0..w.kh {
                    for c in 0..w.kw {
                        let v = w.get(o, i, r, c);
                        if path == ConvPath::Dense || v != 0.0 {
                            t.push((i, r, c, v));
                        }
                    }
                }
            }
            t
        })
        .collect();

    let mut data = vec![0.0f32; w.out_ch * oh * ow];
    for (o, taps) in taps.iter().enumerate() {
        let bias = layer.bias.as_ref().map_or(0.0, |b| b[o]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for &(i, r, c, v) in taps {
                    let y = oy * stride + r;
                    let xx = ox * stride + c;
                    if y < pad || xx < pad || y - pad >= x.height || xx - pad >= x.width {
                        continue;
                    }
                    acc += v * x.at(i, y - pad, xx - pad);
                }
                data[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok(Activation {
        channels: w.out_ch,
        height: oh,
        width: ow,
        data,
    })
}

fn linear(layer: &LayerSpec, x: &Activation) -> Result<Activation> {
    let w = weights(layer)?;
    if w.in_ch != x.data.len() {
        return Err(UpaqError::Shape {
            layer: layer.id.clone(),
            msg: format!("expects {} inputs, got {}", w.in_ch, x.data.len()),
        });
    }
    let data = (0..w.out_ch)
        .map(|o| {
            let row = &w.data[o * w.in_ch..(o + 1) * w.in_ch];
            let init = layer.bias.as_ref().map_or(0.0, |b| b[o]);
            row.iter().zip(&x.data).fold(init, |acc, (a, b)| acc + a * b)
        })
        .collect();
    Ok(Activation {
        channels: w.out_ch,
        height: 1,
        width: 1,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_conv(weights: Tensor4, padding: usize) -> ModelGraph {
        let c = weights.in_ch;
        ModelGraph::new(
            "m",
            [c, 5, 5],
            vec![LayerSpec::conv2d("c", weights, None, 1, padding, &[])],
        )
        .unwrap()
    }

    fn ramp(shape: Shape3) -> Activation {
        let n: usize = shape.iter().product();
        Activation::new(
            shape[0],
            shape[1],
            shape[2],
            (0..n).map(|v| (v as f32 * 0.37).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_1x1() {
        let m = single_conv(Tensor4::new(1, 1, 1, 1, vec![1.0]).unwrap(), 0);
        let x = ramp([1, 5, 5]);
        assert_eq!(forward(&m, &x).unwrap(), x);
    }

    #[test]
    fn padding_keeps_size_and_matches_hand_sum() {
        let m = single_conv(Tensor4::new(1, 1, 3, 3, vec![1.0; 9]).unwrap(), 1);
        let x = Activation::new(1, 5, 5, vec![1.0; 25]).unwrap();
        let y = forward(&m, &x).unwrap();
        assert_eq!(y.shape(), [1, 5, 5]);
        assert_eq!(y.data[0], 4.0); // corner sees 2x2
        assert_eq!(y.data[12], 9.0); // center
        assert_eq!(y.data[2], 6.0); // edge
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let layers = vec![
            LayerSpec::conv2d("c", Tensor4::zeros(2, 1, 3, 3), None, 1, 1, &[]),
            LayerSpec::op("r", LayerKind::Relu, &["c"]),
            LayerSpec::op("g", LayerKind::GlobalAvgPool, &["r"]),
            LayerSpec::linear("fc", Tensor4::zeros(3, 2, 1, 1), None, "g"),
        ];
        let m = ModelGraph::new("m", [1, 5, 5], layers).unwrap();
        let y = forward(&m, &ramp([1, 5, 5])).unwrap();
        assert_eq!(y.data, vec![0.0; 3]);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = single_conv(Tensor4::new(1, 1, 1, 1, vec![1.0]).unwrap(), 0);
        assert!(forward(&m, &ramp([2, 5, 5])).is_err());
    }

    #[test]
    fn skip_zero_path_is_bitwise_equal() {
        let data: Vec<f32> = (0..2 * 3 * 9)
            .map(|v| if v % 3 == 0 { 0.0 } else { (v as f32 * 0.11).cos() })
            .collect();
        let m = single_conv(Tensor4::new(2, 3, 3, 3, data).unwrap(), 1);
        let x = ramp([3, 5, 5]);
        let a = forward_with(&m, &x, ConvPath::Dense).unwrap();
        let b = forward_with(&m, &x, ConvPath::SkipZeros).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stride_two() {
        let mut layer = LayerSpec::conv2d("c", Tensor4::new(1, 1, 1, 1, vec![2.0]).unwrap(), None, 2, 0, &[]);
        layer.stride = 2;
        let m = ModelGraph::new("m", [1, 5, 5], vec![layer]).unwrap();
        let x = ramp([1, 5, 5]);
        let y = forward(&m, &x).unwrap();
        assert_eq!(y.shape(), [1, 3, 3]);
        assert_eq!(y.data[4], 2.0 * x.data[12]);
    }
}

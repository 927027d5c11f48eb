//! Neutral model representation.
//!
//! A [`ModelGraph`] is an ordered list of layers whose order is a valid
//! topological order of the computation graph. Convolution and linear layers
//! own a dense [`Tensor4`]; everything else is weightless.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UpaqError};

/// Dense weight tensor in `(out_ch, in_ch, kh, kw)` row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(out_ch: usize, in_ch: usize, kh: usize, kw: usize, data: Vec<f32>) -> Result<Self> {
        let expected = out_ch * in_ch * kh * kw;
        if data.len() != expected {
            return Err(UpaqError::Param(format!(
                "tensor data length {} != {out_ch}x{in_ch}x{kh}x{kw} = {expected}",
                data.len()
            )));
        }
        Ok(Self {
            out_ch,
            in_ch,
            kh,
            kw,
            data,
        })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> Self {
        Self {
            out_ch,
            in_ch,
            kh,
            kw,
            data: vec![0.0; out_ch * in_ch * kh * kw],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kh, self.kw]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, o: usize, i: usize, r: usize, c: usize) -> usize {
        ((o * self.in_ch + i) * self.kh + r) * self.kw + c
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, r: usize, c: usize) -> f32 {
        self.data[self.offset(o, i, r, c)]
    }

    /// Number of 2D kernel slices, one per `(out, in)` pair.
    pub fn slice_count(&self) -> usize {
        self.out_ch * self.in_ch
    }

    pub fn slice_len(&self) -> usize {
        self.kh * self.kw
    }

    /// The `kh x kw` plane at slice index `s = out * in_ch + in`.
    pub fn slice(&self, s: usize) -> &[f32] {
        let n = self.slice_len();
        &self.data[s * n..(s + 1) * n]
    }

    pub fn slice_mut(&mut self, s: usize) -> &mut [f32] {
        let n = self.slice_len();
        &mut self.data[s * n..(s + 1) * n]
    }

    pub fn nonzero_count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    Relu,
    Add,
    GlobalAvgPool,
    Linear,
}

impl LayerKind {
    pub fn has_weights(self) -> bool {
        matches!(self, LayerKind::Conv2d | LayerKind::Linear)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub weights: Option<Tensor4>,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub padding: usize,
    /// Producer layer ids. Empty means the layer reads the model input.
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn conv2d(
        id: impl Into<String>,
        weights: Tensor4,
        bias: Option<Vec<f32>>,
        stride: usize,
        padding: usize,
        inputs: &[&str],
    ) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::Conv2d,
            weights: Some(weights),
            bias,
            stride,
            padding,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Fully connected layer; `weights` is `(out, in, 1, 1)`.
    pub fn linear(id: impl Into<String>, weights: Tensor4, bias: Option<Vec<f32>>, input: &str) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::Linear,
            weights: Some(weights),
            bias,
            stride: 1,
            padding: 0,
            inputs: vec![input.to_string()],
        }
    }

    pub fn op(id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            kind,
            weights: None,
            bias: None,
            stride: 1,
            padding: 0,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Activation shape `(channels, height, width)`.
pub type Shape3 = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub input_shape: Shape3,
    pub layers: Vec<LayerSpec>,
}

impl ModelGraph {
    /// Builds and validates a model.
    pub fn new(name: impl Into<String>, input_shape: Shape3, layers: Vec<LayerSpec>) -> Result<Self> {
        let model = Self {
            name: name.into(),
            input_shape,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn layer_mut(&mut self, id: &str) -> Option<&mut LayerSpec> {
        self.layers.iter_mut().find(|l| l.id == id)
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.kind == LayerKind::Conv2d)
    }

    /// Indices of layers consuming each layer's output.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.as_str(), i))
            .collect();
        let mut out = vec![Vec::new(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            for input in &layer.inputs {
                if let Some(&p) = index.get(input.as_str()) {
                    out[p].push(i);
                }
            }
        }
        out
    }

    /// Independent copy; shares no storage with `self`.
    pub fn deep_copy(&self) -> ModelGraph {
        self.clone()
    }

    /// Checks structural and numeric invariants and returns the inferred
    /// output shape of every layer.
    pub fn validate(&self) -> Result<Vec<Shape3>> {
        if self.layers.is_empty() {
            return Err(UpaqError::model("no sink layer"));
        }
        if self.input_shape.contains(&0) {
            return Err(UpaqError::model(format!(
                "input shape {:?} has a zero dimension",
                self.input_shape
            )));
        }

        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let id = layer.id.as_str();
            if id.is_empty() {
                return Err(UpaqError::model(format!("layer {i} has an empty id")));
            }
            for input in &layer.inputs {
                if !seen.contains_key(input.as_str()) {
                    let msg = if self.layers.iter().any(|l| &l.id == input) {
                        format!("input '{input}' appears later in the layer list (cycle or bad order)")
                    } else {
                        format!("input '{input}' references an unknown layer")
                    };
                    return Err(UpaqError::validation(id, msg));
                }
            }
            if seen.insert(id, i).is_some() {
                return Err(UpaqError::validation(id, "duplicate layer id"));
            }

            let arity_ok = match layer.kind {
                LayerKind::Add => layer.inputs.len() == 2,
                _ => layer.inputs.len() <= 1,
            };
            if !arity_ok {
                return Err(UpaqError::validation(
                    id,
                    format!("{:?} layer cannot take {} inputs", layer.kind, layer.inputs.len()),
                ));
            }
            if layer.kind.has_weights() != layer.weights.is_some() {
                return Err(UpaqError::validation(
                    id,
                    if layer.kind.has_weights() {
                        "missing weights"
                    } else {
                        "weightless layer kind carries weights"
                    },
                ));
            }
            if !layer.kind.has_weights() && layer.bias.is_some() {
                return Err(UpaqError::validation(id, "weightless layer kind carries a bias"));
            }
            if let Some(w) = &layer.weights {
                if w.data.len() != w.out_ch * w.in_ch * w.kh * w.kw || w.is_empty() {
                    return Err(UpaqError::validation(
                        id,
                        "weight tensor length does not match its shape",
                    ));
                }
                if !w.is_finite() {
                    return Err(UpaqError::validation(id, "non-finite weight"));
                }
                if let Some(b) = &layer.bias {
                    if b.len() != w.out_ch {
                        return Err(UpaqError::validation(
                            id,
                            format!("bias length {} != out channels {}", b.len(), w.out_ch),
                        ));
                    }
                    if b.iter().any(|v| !v.is_finite()) {
                        return Err(UpaqError::validation(id, "non-finite bias"));
                    }
                }
            }
            if layer.kind == LayerKind::Conv2d && layer.stride == 0 {
                return Err(UpaqError::validation(id, "stride must be at least 1"));
            }
        }

        let consumers = self.consumers();
        let sinks = consumers.iter().filter(|c| c.is_empty()).count();
        if sinks != 1 {
            return Err(UpaqError::model(format!(
                "expected exactly one sink layer, found {sinks}"
            )));
        }

        self.infer_shapes()
    }

    /// Output shape of each layer, in layer order.
    pub fn infer_shapes(&self) -> Result<Vec<Shape3>> {
        let mut shapes: Vec<Shape3> = Vec::with_capacity(self.layers.len());
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let input_of = |k: usize| -> Shape3 {
                match layer.inputs.get(k) {
                    Some(id) => shapes[index[id.as_str()]],
                    None => self.input_shape,
                }
            };
            let shape_err = |msg: String| UpaqError::Shape {
                layer: layer.id.clone(),
                msg,
            };
            let shape = match layer.kind {
                LayerKind::Conv2d => {
                    let [c, h, w] = input_of(0);
                    let wt = layer.weights.as_ref().expect("validated");
                    if wt.in_ch != c {
                        return Err(shape_err(format!("conv expects {} input channels, got {c}", wt.in_ch)));
                    }
                    let ph = h + 2 * layer.padding;
                    let pw = w + 2 * layer.padding;
                    if ph < wt.kh || pw < wt.kw {
                        return Err(shape_err(format!(
                            "kernel {}x{} larger than padded input {ph}x{pw}",
                            wt.kh, wt.kw
                        )));
                    }
                    [
                        wt.out_ch,
                        (ph - wt.kh) / layer.stride + 1,
                        (pw - wt.kw) / layer.stride + 1,
                    ]
                }
                LayerKind::Relu => input_of(0),
                LayerKind::Add => {
                    let (a, b) = (input_of(0), input_of(1));
                    if a != b {
                        return Err(shape_err(format!("add operands differ: {a:?} vs {b:?}")));
                    }
                    a
                }
                LayerKind::GlobalAvgPool => [input_of(0)[0], 1, 1],
                LayerKind::Linear => {
                    let [c, h, w] = input_of(0);
                    let wt = layer.weights.as_ref().expect("validated");
                    if wt.kh != 1 || wt.kw != 1 {
                        return Err(shape_err("linear weights must be (out, in, 1, 1)".into()));
                    }
                    if wt.in_ch != c * h * w {
                        return Err(shape_err(format!(
                            "linear expects {} inputs, got {}",
                            wt.in_ch,
                            c * h * w
                        )));
                    }
                    [wt.out_ch, 1, 1]
                }
            };
            index.insert(layer.id.as_str(), i);
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Sum of weight and bias element counts across all layers.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_ref().map_or(0, |w| w.len()) + l.bias.as_ref().map_or(0, |b| b.len()))
            .sum()
    }
}

//! Pattern pruning and mixed-precision quantization for small convolutional
//! networks.
//!
//! Coupled conv layers are grouped under a root, a pattern and bitwidth are
//! searched on the root with an efficiency score, and the choice is applied
//! to every layer of the group. The result serializes to a compact container
//! and runs on the bundled direct-convolution engine.
//!
//! ```
//! use upaq::compressor::{compress_model, CompressionProfile};
//! use upaq::cost::AnalyticCost;
//! use upaq::harness::{gen_fixture, evaluate_fidelity, FixtureArch};
//!
//! let (model, inputs) = gen_fixture(FixtureArch::ToyCnn, 42)?;
//! let compressed = compress_model(&model, &CompressionProfile::hck(7), &AnalyticCost)?;
//! let report = evaluate_fidelity(&model, &compressed, &inputs[..4])?;
//! assert!(report.compression_ratio > 4.0);
//! # Ok::<(), upaq::UpaqError>(())
//! ```

pub mod bitpack;
pub mod compressed;
pub mod compressor;
pub mod cost;
pub mod error;
pub mod format;
pub mod grouping;
pub mod harness;
pub mod inference;
pub mod model;
pub mod patterns;
pub mod quantizer;

pub use compressed::CompressedModel;
pub use compressor::{compress_model, CompressionProfile};
pub use error::{Result, UpaqError};
pub use model::{LayerKind, LayerSpec, ModelGraph, Tensor4};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/model-format.md")]
    pub mod model_format {}
    #[doc = include_str!("../../../book/src/grouping.md")]
    pub mod grouping {}
    #[doc = include_str!("../../../book/src/patterns.md")]
    pub mod patterns {}
    #[doc = include_str!("../../../book/src/quantization.md")]
    pub mod quantization {}
    #[doc = include_str!("../../../book/src/search.md")]
    pub mod search {}
    #[doc = include_str!("../../../book/src/one-by-one.md")]
    pub mod one_by_one {}
    #[doc = include_str!("../../../book/src/inference.md")]
    pub mod inference {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}

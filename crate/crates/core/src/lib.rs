//! Adapter fusion for per-speaker adaptation, with a Householder-product
//! reparameterization of the fusion value layer.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors with reverse-mode autodiff (the substrate);
//! - [`encoder`]: a small transformer encoder with two task heads;
//! - [`adapter`]: residual adapter modules trained per speaker;
//! - [`fusion`]: the fusion layer (attention over adapters + value transform);
//! - [`householder`]: orthogonal value parameterization from reflection couples;
//! - [`analysis`]: SVD ablations, parameter counting, orthogonality audits;
//! - [`pipeline`]: synthetic corpora and the four-step training strategy;
//! - [`checkpoint`]: named-parameter flat-map serialization.
//!
//! All math is generic over [`scalar::Scalar`] (`f32`/`f64`); the pipeline and
//! the aliases at the crate root pin `f64`.

pub mod adapter;
pub mod analysis;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod householder;
pub mod layers;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

// ── f64 instantiations used by the pipeline and CLI ──────────────────

pub type Tensor64 = tensor::Tensor<f64>;
pub type Adapter64 = adapter::AdapterLayer<f64>;
pub type Fusion64 = fusion::FusionLayer<f64>;
pub type Householder64 = householder::HouseholderStack<f64>;
pub type Encoder64 = encoder::EncoderModel<f64>;

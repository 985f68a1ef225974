//! Cross-domain latent modulation: a paired-domain variational transfer
//! model where one domain's deep representation perturbs the other domain's
//! reparameterization, trained adversarially with split optimizers.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] — a reverse-mode autodiff engine over dense row-major
//!   tensors, including convolution, transposed convolution, and a
//!   gradient-reversal op;
//! - [`model`] — the shared encoder (variational moments + bounded deep
//!   representation), the cross-domain modulated reparameterization, the
//!   shared decoder, and the domain discriminator;
//! - [`losses`] — reconstruction, KL on the modulated moments, adversarial,
//!   and pairwise consistency terms plus their weighted aggregation;
//! - [`data`] — procedural paired-domain glyph datasets, the IDX reader, a
//!   noisy-background compositor, and disk import/export;
//! - [`optim`] / [`trainer`] — SGD-momentum and Adam over named parameter
//!   partitions, and the split-update training loop with loss traces;
//! - [`checkpoint`] — a versioned binary state format with bit-exact resume;
//! - [`eval`] — source classifier, adaptation accuracy, a proxy domain
//!   distance, Monte-Carlo moment verification, image metrics, embedding
//!   export, and the ablation grid runner.
//!
//! Everything is generic over the scalar type via [`num::Scalar`]; training
//! normally runs in `f32` while gradient verification uses `f64`. The
//! aliases below pin the two concrete instantiations.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod num;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{CdlmError, Result};
pub use num::Scalar;

/// f32 instantiations — the training precision.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph32 = tensor::Graph<f32>;
pub type Model32 = model::CdlmModel<f32>;
pub type TrainState32 = trainer::TrainState<f32>;
pub type Batch32 = data::DomainBatch<f32>;

/// f64 instantiations — the verification precision.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = tensor::Graph<f64>;
pub type Model64 = model::CdlmModel<f64>;
pub type TrainState64 = trainer::TrainState<f64>;
pub type Batch64 = data::DomainBatch<f64>;

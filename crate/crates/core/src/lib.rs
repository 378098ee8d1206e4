//! Binocular vision transformer with a dropout voting head.
//!
//! Two fundus images (target and fellow eye) are encoded by a shared patch
//! transformer, fused by bidirectional cross-attention, and summarized by the
//! concatenation of both `[CLS]` tokens. Three heads read that summary: a
//! glaucoma head evaluated `n` times with dropout kept on (the votes), and
//! auxiliary age and sex heads. Training targets are rater-panel soft labels
//! and the model's vote variance is regularized toward the panel's variance.
//!
//! The numeric core is generic over [`Scalar`] (`f32`/`f64`); the aliases at
//! the crate root fix the precision to `f64`, which is what the rest of the
//! tooling uses.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use kv::KvConfig;
pub use model::{predict_probability, VVitConfig, VoteBundle};
pub use rng::Rng;
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type VVit = model::VVit<f64>;
pub type VVit32 = model::VVit<f32>;
pub type ModelOutput = model::ModelOutput<f64>;
pub type Adam = tensor::optim::Adam<f64>;

//! Latent diffusion target sound extraction.
//!
//! Numeric code is generic over [`scalar::Scalar`]; the aliases below fix the
//! precision for the common cases. `f32` is the working precision, `f64` is
//! used by gradient checks and oracles.

pub mod audio;
pub mod backbone;
pub mod codec;
pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod latent;
pub mod matrix;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

pub type Backbone32 = backbone::Backbone<f32>;
pub type Backbone64 = backbone::Backbone<f64>;
pub type Checkpoint32 = trainer::Checkpoint<f32>;
pub type Checkpoint64 = trainer::Checkpoint<f64>;
pub type Latent32 = latent::LatentSequence<f32>;
pub type Latent64 = latent::LatentSequence<f64>;
pub type Embedding32 = conditioning::ReferenceEmbedding<f32>;
pub type Embedding64 = conditioning::ReferenceEmbedding<f64>;
pub type Example32 = trainer::TrainingExample<f32>;

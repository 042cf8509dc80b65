//! Causality-aware generation of spatial transcriptomics profiles from
//! single-cell data: latent diffusion with an autoregressive causal
//! attention mask, plus the surrounding data, Granger and metric tooling.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the command-line tool.

pub mod ablate;
pub mod arplan;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod generate;
pub mod granger;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod special;
pub mod synth;
pub mod tensor;
pub mod train;

pub use arplan::{generate_ar_steps, ARStepPlan};
pub use config::Config;
pub use data::{ExpressionMatrix, Modality};
pub use diffusion::{DiffusionSchedule, SamplingStrategy};
pub use error::{Error, Result};
pub use generate::{generate_genes, InferenceConfig};
pub use mask::{build_mask, mask_oracle, AttentionMask};
pub use model::{CatParameters, ModelConfig};
pub use scalar::Scalar;
pub use tensor::Matrix;
pub use train::{fit, Dataset, TrainConfig, TrainedModel};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Expression64 = ExpressionMatrix<f64>;
pub type Expression32 = ExpressionMatrix<f32>;
pub type Schedule64 = DiffusionSchedule<f64>;
pub type Schedule32 = DiffusionSchedule<f32>;
pub type Params64 = CatParameters<f64>;
pub type Params32 = CatParameters<f32>;
pub type Model64 = TrainedModel<f64>;
pub type Model32 = TrainedModel<f32>;

//! Unsupervised deformable image registration by pyramidal residual
//! deformation field estimation.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`autograd`]: dense arrays and reverse-mode differentiation.
//! * [`sampler`]: differentiable backward warping by displacement fields.
//! * [`field`]: residual upsampling with magnitude scaling, accumulation of
//!   residuals into total fields, Jacobian analysis.
//! * [`encoder`], [`models`]: the shared-weight feature pyramid and the
//!   registration networks (full model plus three ablation variants).
//! * [`loss`], [`optim`], [`train`]: the unsupervised objective and training loop.
//! * [`simdata`], [`eval`], [`render`]: simulated benchmark, metrics, field rendering.
//! * [`io`], [`config`]: array container, checkpoints and run configuration.

pub mod autograd;
pub mod config;
mod conv;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod field;
pub mod io;
pub mod loss;
pub mod models;
pub mod optim;
pub mod params;
pub mod render;
mod resample;
pub mod sampler;
pub mod simdata;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use models::{ModelConfig, Variant};
pub use params::ModelParams;
pub use sampler::{DisplacementField, Labels};
pub use tensor::{Array, DType, Real};

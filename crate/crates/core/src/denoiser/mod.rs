//! Graph-transformer denoiser, its loss, and training.

mod model;
mod output;
pub mod tape;
mod train;

pub use model::{DenoiserConfig, DenoiserError, DenoiserParams, ModelShape, PLACEHOLDER, PLACEHOLDER_INIT};
pub use output::DenoiserOutput;
pub use train::{fit, grad, loss, LOG_CLAMP, loss_and_grad, train, AmsGrad, TrainOptions, TrainResult};

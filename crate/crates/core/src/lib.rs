//! Frequency- and text-modulated selective state-space blocks inside a
//! latent denoising-diffusion loop, with a synthetic motion corpus and an
//! evaluation metric suite.

pub mod audit;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod freq_mamba;
pub(crate) mod layers;
pub mod metrics;
pub mod rng;
pub mod synthetic_motion;
pub mod ssm_core;
pub mod tensor_grad;
pub mod text_mamba;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor_grad::{Graph, ParameterSet, Tensor, Var};

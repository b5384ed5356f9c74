//! Conditional denoising diffusion for paired source→target image translation
//! (RGB → thermal), built on a small reverse-mode autodiff engine.
//!
//! Module map:
//! - [`tensor`]: N-d arrays and the recording [`tensor::Graph`] used for backprop.
//! - [`diffusion`]: noise schedules, forward corruption, posterior and sampler.
//! - [`unet`]: the conditional U-Net denoiser with configurable attention levels.
//! - [`data`]: paired dataset loading and the synthetic scene generator.
//! - [`metrics`]: PSNR, SSIM, Fréchet feature distance, intensity spread.
//! - [`train`]: optimizer, EMA, checkpoints and the experiment protocols.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Graph, Tensor, Var};

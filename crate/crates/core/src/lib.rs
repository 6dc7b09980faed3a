//! Wavelet-domain diffusion GAN engine: tensors with reverse-mode autodiff,
//! Haar transforms, frequency-aware generator/discriminator, few-step
//! diffusion, adversarial training, cost accounting and file formats.

pub mod error;

pub mod accounting;
pub mod autograd;
pub mod bench;
pub mod diffusion;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod networks;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;

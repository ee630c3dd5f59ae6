//! Mel-spectrogram speech inpainting with a denoising diffusion model.
//!
//! A denoiser predicts the noise in a partially observed log-mel
//! spectrogram. Sampling blends the observed frames back in at every step,
//! combines conditional and unconditional predictions, and can steer the
//! missing frames toward a known transcript using the input gradient of a
//! CTC classifier.
//!
//! Module map:
//!
//! - [`audio`]: STFT, mel projection, normalization, Griffin-Lim, WAV I/O.
//! - [`mask`]: frame masks for training and evaluation.
//! - [`diffusion`]: noise schedule, forward noising, training objective.
//! - [`models`]: the U-Net and transformer denoisers and waveform conditioners.
//! - [`guidance`]: vocabularies, CTC loss, the timestep-aware classifier.
//! - [`sampler`]: the guided reverse process.
//! - [`metrics`]: DTW, mel-cepstral distortion, log-F0 error.
//! - [`checkpoint`]: named-array archives for weights and state.
//!
//! Everything numeric is generic over [`Real`]; [`f32`] aliases are provided
//! for the common case.

pub mod audio;
pub mod checkpoint;
pub mod diffusion;
pub mod guidance;
pub mod mask;
pub mod metrics;
pub mod models;
pub mod sampler;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use inpaint_autograd as autograd;
pub use inpaint_autograd::{Scalar, Tensor};

/// Element type accepted throughout the crate.
pub trait Real: Scalar + rustfft::FftNum {}

impl<T: Scalar + rustfft::FftNum> Real for T {}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("infeasible mask: {0}")]
    InfeasibleMask(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] inpaint_autograd::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<R>(msg: impl Into<String>) -> Result<R> {
    Err(Error::InvalidInput(msg.into()))
}

/// A tensor of independent standard normal draws.
pub fn randn<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z)
    })
}

pub type Waveform32 = audio::Waveform<f32>;
pub type MelSpectrogram32 = audio::MelSpectrogram<f32>;
pub type DiffusionSchedule32 = diffusion::DiffusionSchedule<f32>;
pub type Dit32 = models::Dit<f32>;
pub type UNet32 = models::UNet<f32>;
pub type Conformer32 = guidance::Conformer<f32>;

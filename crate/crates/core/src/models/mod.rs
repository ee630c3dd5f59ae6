//! Noise-prediction networks.
//!
//! Two backbones implement [`Denoiser`]: a transformer over per-frame tokens
//! ([`Dit`]) that reads the masked spectrogram, and a small 2-D U-Net
//! ([`UNet`]) that reads features of the masked waveform through a
//! pluggable [`WaveEncoder`].

mod attention;
mod conditioner;
mod dit;
mod unet;

use inpaint_autograd::{Graph, ParamStore, Var};
use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use attention::SelfAttention;
pub use conditioner::{ConvEncoder, EncoderRegistry, EnergyEncoder, WaveConditioner, WaveEncoder};
pub use dit::{Dit, DitConfig};
pub use unet::{UNet, UNetConfig};

use crate::audio::{HOP, N_MELS};
use crate::mask::{mask_samples, mask_tensor, FrameMask};
use crate::{invalid, Error, Real, Result, Tensor};

/// What a denoiser is conditioned on. The null condition is all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionInput<T> {
    /// Masked spectrogram `[80, L]`.
    pub masked_mel: Tensor<T>,
    /// Masked waveform of `L * 160` samples, when available.
    pub masked_wave: Option<Vec<T>>,
}

impl<T: Real> ConditionInput<T> {
    /// Masks a clean spectrogram (and waveform) with `mask`.
    pub fn observed(x0: &Tensor<T>, mask: &FrameMask, wave: Option<&[T]>) -> Result<Self> {
        Ok(Self {
            masked_mel: mask_tensor(x0, mask)?,
            masked_wave: wave.map(|w| mask_samples(w, mask)),
        })
    }

    /// Wraps inputs that are already masked.
    pub fn from_masked(masked_mel: Tensor<T>, masked_wave: Option<Vec<T>>) -> Self {
        Self {
            masked_mel,
            masked_wave,
        }
    }

    pub fn null_like(&self) -> Self {
        Self {
            masked_mel: Tensor::zeros(self.masked_mel.shape()),
            masked_wave: self.masked_wave.as_ref().map(|w| vec![T::zero(); w.len()]),
        }
    }

    pub fn is_null(&self) -> bool {
        let z = T::zero();
        self.masked_mel.data().iter().all(|v| *v == z)
            && self.masked_wave.as_ref().is_none_or(|w| w.iter().all(|v| *v == z))
    }

    pub fn frames(&self) -> usize {
        self.masked_mel.cols()
    }

    /// The waveform padded or cut to exactly `L * 160` samples; zeros when absent.
    pub fn wave_or_silence(&self) -> Vec<T> {
        let n = self.frames() * HOP;
        let mut w = self.masked_wave.clone().unwrap_or_default();
        w.resize(n, T::zero());
        w
    }
}

/// A network predicting the noise in `x_in`.
pub trait Denoiser<T: Real> {
    fn params(&self) -> &ParamStore<T>;

    fn params_mut(&mut self) -> &mut ParamStore<T>;

    /// Records the `[80, L]` prediction on `g`, which must read this
    /// model's parameter store.
    fn forward(&self, g: &mut Graph<'_, T>, x_in: Var, cond: &ConditionInput<T>, t: usize) -> Result<Var>;

    /// Preferred share of the loss on masked frames.
    fn masked_loss_weight(&self) -> Option<f64> {
        None
    }

    /// Inference without gradient tracking.
    fn predict(&self, x_in: &Tensor<T>, cond: &ConditionInput<T>, t: usize) -> Result<Tensor<T>> {
        let mut g = Graph::with_params(self.params(), false);
        let x = g.constant(x_in.clone());
        let y = self.forward(&mut g, x, cond, t)?;
        Ok(g.value(y).clone())
    }
}

pub(crate) fn check_mel_input<T: Real>(x: &Tensor<T>, cond: &ConditionInput<T>) -> Result<usize> {
    if x.ndim() != 2 || x.rows() != N_MELS || x.cols() == 0 {
        return invalid(format!("denoiser input must be [{N_MELS}, L], got {:?}", x.shape()));
    }
    if cond.masked_mel.shape() != x.shape() {
        return invalid(format!(
            "condition {:?} does not match input {:?}",
            cond.masked_mel.shape(),
            x.shape()
        ));
    }
    Ok(x.cols())
}

/// Sinusoidal embedding of step `t`: `dim / 2` sines followed by as many
/// cosines, at frequencies `10000^(-i / (dim / 2))`.
pub fn timestep_embed<T: Real>(t: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return invalid(format!("timestep embedding needs an even positive size, got {dim}"));
    }
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = T::lit(arg.sin());
        out[half + i] = T::lit(arg.cos());
    }
    Ok(Tensor::from_vec(&[1, dim], out)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserKind {
    Unet,
    Dit,
}

/// Shape of either backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    /// U-Net channels at full resolution.
    pub base_channels: usize,
    /// Transformer blocks.
    pub blocks: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Waveform feature channels after upsampling.
    pub cond_dim: usize,
    /// Registered waveform encoder name.
    pub conditioner: String,
}

impl DenoiserConfig {
    pub fn dit(model_dim: usize, heads: usize, blocks: usize) -> Self {
        Self {
            kind: DenoiserKind::Dit,
            base_channels: 32,
            blocks,
            model_dim,
            heads,
            cond_dim: 16,
            conditioner: "conv".into(),
        }
    }

    pub fn unet(base_channels: usize, cond_dim: usize, conditioner: &str) -> Self {
        Self {
            kind: DenoiserKind::Unet,
            base_channels,
            blocks: 1,
            model_dim: 64,
            heads: 4,
            cond_dim,
            conditioner: conditioner.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.base_channels, self.blocks, self.model_dim, self.heads, self.cond_dim];
        if dims.contains(&0) {
            return Err(Error::Config(format!("denoiser dimensions must be positive: {self:?}")));
        }
        if self.kind == DenoiserKind::Dit && (self.model_dim % self.heads != 0 || self.model_dim % 2 != 0) {
            return Err(Error::Config("model_dim must be even and divisible by heads".into()));
        }
        Ok(())
    }

    pub fn build<T: Real>(&self, rng: &mut dyn RngCore) -> Result<AnyDenoiser<T>> {
        self.validate()?;
        Ok(match self.kind {
            DenoiserKind::Dit => AnyDenoiser::Dit(Dit::new(
                DitConfig {
                    dim: self.model_dim,
                    heads: self.heads,
                    blocks: self.blocks,
                    ..DitConfig::default()
                },
                rng,
            )?),
            DenoiserKind::Unet => AnyDenoiser::UNet(UNet::new(
                UNetConfig {
                    base_channels: self.base_channels,
                    cond_dim: self.cond_dim,
                    conditioner: self.conditioner.clone(),
                    ..UNetConfig::default()
                },
                &EncoderRegistry::with_defaults(),
                rng,
            )?),
        })
    }
}

/// Either backbone behind one type.
pub enum AnyDenoiser<T: Real> {
    Dit(Dit<T>),
    UNet(UNet<T>),
}

impl<T: Real> Denoiser<T> for AnyDenoiser<T> {
    fn params(&self) -> &ParamStore<T> {
        match self {
            Self::Dit(m) => m.params(),
            Self::UNet(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Self::Dit(m) => m.params_mut(),
            Self::UNet(m) => m.params_mut(),
        }
    }

    fn forward(&self, g: &mut Graph<'_, T>, x_in: Var, cond: &ConditionInput<T>, t: usize) -> Result<Var> {
        match self {
            Self::Dit(m) => m.forward(g, x_in, cond, t),
            Self::UNet(m) => m.forward(g, x_in, cond, t),
        }
    }

    fn masked_loss_weight(&self) -> Option<f64> {
        match self {
            Self::Dit(m) => m.masked_loss_weight(),
            Self::UNet(m) => m.masked_loss_weight(),
        }
    }
}

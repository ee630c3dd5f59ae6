//! Convolutional denoiser over the spectrogram as a one-channel image.
//!
//! Waveform features are projected to 80 rows and stacked with the noisy
//! spectrogram as a second input channel. The network works at three
//! resolutions (80 x L, 40 x L/2, 20 x L/4); the time axis is zero-padded to
//! a multiple of four first and the output is cropped back to `L`.

use inpaint_autograd::nn::{group_count, Conv1d, Conv2d, GroupNorm, Init, Linear};
use inpaint_autograd::{Graph, ParamStore, Var};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{check_mel_input, timestep_embed, ConditionInput, Denoiser, EncoderRegistry, WaveConditioner};
use crate::audio::N_MELS;
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub conditioner: String,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            cond_dim: 16,
            time_dim: 64,
            conditioner: "conv".into(),
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Real>(
        s: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        time_dim: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let init = Init::Scaled { gain: 1.0 };
        Ok(Self {
            norm1: GroupNorm::new(s, &format!("{name}.norm1"), c_in, group_count(c_in))?,
            conv1: Conv2d::new(s, &format!("{name}.conv1"), c_in, c_out, 3, 1, init, rng)?,
            time: Linear::new(s, &format!("{name}.time"), time_dim, c_out, init, rng)?,
            norm2: GroupNorm::new(s, &format!("{name}.norm2"), c_out, group_count(c_out))?,
            conv2: Conv2d::new(s, &format!("{name}.conv2"), c_out, c_out, 3, 1, init, rng)?,
            skip: if c_in == c_out {
                None
            } else {
                Some(Conv2d::new(s, &format!("{name}.skip"), c_in, c_out, 1, 1, init, rng)?)
            },
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, h)?;
        let tproj = self.time.forward(g, temb)?;
        let h = g.add_col(h, tproj)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(g, x)?,
            None => x,
        };
        Ok(g.add(h, skip)?)
    }
}

/// Stacks `[c1, H, W]` and `[c2, H, W]` into `[c1 + c2, H, W]`.
fn concat_channels<T: Real>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    let hw = sa[1] * sa[2];
    let fa = g.reshape(a, &[sa[0], hw])?;
    let fb = g.reshape(b, &[sb[0], hw])?;
    let cat = g.concat_rows(&[fa, fb])?;
    Ok(g.reshape(cat, &[sa[0] + sb[0], sa[1], sa[2]])?)
}

pub struct UNet<T: Real> {
    store: ParamStore<T>,
    cfg: UNetConfig,
    conditioner: WaveConditioner<T>,
    cond_proj: Conv1d,
    time: [Linear; 2],
    conv_in: Conv2d,
    enc0: ResBlock,
    down0: Conv2d,
    enc1: ResBlock,
    down1: Conv2d,
    mid: ResBlock,
    up1: Conv2d,
    dec1: ResBlock,
    up0: Conv2d,
    dec0: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl<T: Real> UNet<T> {
    pub fn new(cfg: UNetConfig, registry: &EncoderRegistry<T>, rng: &mut dyn RngCore) -> Result<Self> {
        let (c, td) = (cfg.base_channels, cfg.time_dim);
        if c == 0 || cfg.cond_dim == 0 || td == 0 || td % 2 != 0 {
            return Err(Error::Config(format!("invalid U-Net shape {cfg:?}")));
        }
        let mut store = ParamStore::new();
        let s = &mut store;
        let init = Init::Scaled { gain: 1.0 };
        let conditioner = WaveConditioner::new(registry, &cfg.conditioner, s, "cond", cfg.cond_dim, rng)?;
        let cond_proj = Conv1d::new(s, "cond_proj", cfg.cond_dim, N_MELS, 1, 1, 0, 1, rng)?;
        let time = [
            Linear::new(s, "time.0", td, td, init, rng)?,
            Linear::new(s, "time.1", td, td, init, rng)?,
        ];
        Ok(Self {
            conv_in: Conv2d::new(s, "conv_in", 2, c, 3, 1, init, rng)?,
            enc0: ResBlock::new(s, "enc0", c, c, td, rng)?,
            down0: Conv2d::new(s, "down0", c, c, 3, 2, init, rng)?,
            enc1: ResBlock::new(s, "enc1", c, 2 * c, td, rng)?,
            down1: Conv2d::new(s, "down1", 2 * c, 2 * c, 3, 2, init, rng)?,
            mid: ResBlock::new(s, "mid", 2 * c, 2 * c, td, rng)?,
            up1: Conv2d::new(s, "up1", 2 * c, 2 * c, 3, 1, init, rng)?,
            dec1: ResBlock::new(s, "dec1", 4 * c, 2 * c, td, rng)?,
            up0: Conv2d::new(s, "up0", 2 * c, c, 3, 1, init, rng)?,
            dec0: ResBlock::new(s, "dec0", 2 * c, c, td, rng)?,
            norm_out: GroupNorm::new(s, "norm_out", c, group_count(c))?,
            conv_out: Conv2d::new(s, "conv_out", c, 1, 3, 1, Init::Scaled { gain: 0.1 }, rng)?,
            store,
            cfg,
            conditioner,
            cond_proj,
            time,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn conditioner(&self) -> &WaveConditioner<T> {
        &self.conditioner
    }
}

impl<T: Real> Denoiser<T> for UNet<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn forward(&self, g: &mut Graph<'_, T>, x_in: Var, cond: &ConditionInput<T>, t: usize) -> Result<Var> {
        let l = check_mel_input(g.value(x_in), cond)?;
        let padded = l.div_ceil(4) * 4;

        let feats = self.conditioner.forward(g, &cond.wave_or_silence(), l)?;
        let c = self.cond_proj.forward(g, feats)?;
        let x = g.reshape(x_in, &[1, N_MELS, l])?;
        let c = g.reshape(c, &[1, N_MELS, l])?;
        let h = concat_channels(g, x, c)?;
        let h = g.resize_last(h, padded)?;

        let emb = g.constant(timestep_embed(t, self.cfg.time_dim)?);
        let temb = self.time[0].forward(g, emb)?;
        let temb = g.silu(temb);
        let temb = self.time[1].forward(g, temb)?;
        let temb = g.silu(temb);

        let h = self.conv_in.forward(g, h)?;
        let s0 = self.enc0.forward(g, h, temb)?;
        let h = self.down0.forward(g, s0)?;
        let s1 = self.enc1.forward(g, h, temb)?;
        let h = self.down1.forward(g, s1)?;
        let h = self.mid.forward(g, h, temb)?;

        let h = g.upsample2x(h)?;
        let h = self.up1.forward(g, h)?;
        let h = concat_channels(g, h, s1)?;
        let h = self.dec1.forward(g, h, temb)?;
        let h = g.upsample2x(h)?;
        let h = self.up0.forward(g, h)?;
        let h = concat_channels(g, h, s0)?;
        let h = self.dec0.forward(g, h, temb)?;

        let h = self.norm_out.forward(g, h)?;
        let h = g.silu(h);
        let h = self.conv_out.forward(g, h)?;
        let h = g.reshape(h, &[N_MELS, padded])?;
        Ok(g.resize_last(h, l)?)
    }
}

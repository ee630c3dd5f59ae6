//! Transformer denoiser with adaptive layer norm.
//!
//! Each frame is one token: the noisy frame and the masked frame (80 bins
//! each) are concatenated, projected to the model width, and a depthwise
//! convolutional position signal computed from that projection is added.
//! Every block is modulated by the step embedding through zero-initialized
//! shift/scale/gate projections, and the output head is zero-initialized, so
//! an untrained model predicts exactly zero.

use inpaint_autograd::nn::{Conv1d, Init, Linear};
use inpaint_autograd::{Graph, ParamStore, Var};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{check_mel_input, timestep_embed, ConditionInput, Denoiser, SelfAttention};
use crate::audio::N_MELS;
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DitConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_mult: usize,
    pub pos_kernel: usize,
    /// Share of the loss on masked frames.
    pub masked_loss_weight: f64,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            heads: 4,
            blocks: 6,
            ff_mult: 2,
            pos_kernel: 31,
            masked_loss_weight: 0.8,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    modulation: Linear,
    attn: SelfAttention,
    ff_in: Linear,
    ff_out: Linear,
}

pub struct Dit<T: Real> {
    store: ParamStore<T>,
    cfg: DitConfig,
    input: Linear,
    pos: [Conv1d; 2],
    time: [Linear; 2],
    blocks: Vec<Block>,
    final_modulation: Linear,
    head: Linear,
}

/// `layer_norm(x) * (1 + scale) + shift` with `[dim]`-sized shift and scale.
fn modulate<T: Real>(g: &mut Graph<'_, T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.layer_norm(x, T::lit(1e-6));
    let s = g.add_scalar(scale, T::one());
    let y = g.mul_row(n, s)?;
    Ok(g.add_row(y, shift)?)
}

/// Splits a `[1, k * dim]` row into `k` pieces.
fn chunks<T: Real>(g: &mut Graph<'_, T>, x: Var, k: usize, dim: usize) -> Result<Vec<Var>> {
    (0..k)
        .map(|i| Ok(g.slice_cols(x, i * dim, (i + 1) * dim)?))
        .collect()
}

impl<T: Real> Dit<T> {
    pub fn new(cfg: DitConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let d = cfg.dim;
        if d == 0 || d % 2 != 0 || cfg.heads == 0 || d % cfg.heads != 0 || cfg.pos_kernel % 2 == 0 {
            return Err(Error::Config(format!("invalid transformer shape {cfg:?}")));
        }
        let mut store = ParamStore::new();
        let s = &mut store;
        let init = Init::Scaled { gain: 1.0 };
        let input = Linear::new(s, "input", 2 * N_MELS, d, init, rng)?;
        let k = cfg.pos_kernel;
        let pos = [
            Conv1d::new(s, "pos.0", d, d, k, 1, k / 2, d, rng)?,
            Conv1d::new(s, "pos.1", d, d, k, 1, k / 2, d, rng)?,
        ];
        let time = [
            Linear::new(s, "time.0", d, d, init, rng)?,
            Linear::new(s, "time.1", d, d, init, rng)?,
        ];
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let p = format!("block{i}");
                Ok(Block {
                    modulation: Linear::new(s, &format!("{p}.mod"), d, 6 * d, Init::Zeros, rng)?,
                    attn: SelfAttention::new(s, &format!("{p}.attn"), d, cfg.heads, rng)?,
                    ff_in: Linear::new(s, &format!("{p}.ff_in"), d, cfg.ff_mult * d, init, rng)?,
                    ff_out: Linear::new(s, &format!("{p}.ff_out"), cfg.ff_mult * d, d, init, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_modulation = Linear::new(s, "final.mod", d, 2 * d, Init::Zeros, rng)?;
        let head = Linear::new(s, "head", d, N_MELS, Init::Zeros, rng)?;
        Ok(Self {
            store,
            cfg,
            input,
            pos,
            time,
            blocks,
            final_modulation,
            head,
        })
    }

    pub fn config(&self) -> &DitConfig {
        &self.cfg
    }
}

impl<T: Real> Denoiser<T> for Dit<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn masked_loss_weight(&self) -> Option<f64> {
        Some(self.cfg.masked_loss_weight)
    }

    fn forward(&self, g: &mut Graph<'_, T>, x_in: Var, cond: &ConditionInput<T>, t: usize) -> Result<Var> {
        check_mel_input(g.value(x_in), cond)?;
        let d = self.cfg.dim;
        let xm = g.constant(cond.masked_mel.clone());
        let both = g.concat_rows(&[x_in, xm])?;
        let tokens = g.transpose(both)?;
        let h = self.input.forward(g, tokens)?;

        let ht = g.transpose(h)?;
        let p = self.pos[0].forward(g, ht)?;
        let p = g.gelu(p);
        let p = self.pos[1].forward(g, p)?;
        let p = g.gelu(p);
        let p = g.transpose(p)?;
        let mut h = g.add(h, p)?;

        let emb = g.constant(timestep_embed(t, d)?);
        let c = self.time[0].forward(g, emb)?;
        let c = g.silu(c);
        let c = self.time[1].forward(g, c)?;
        let c = g.silu(c);

        for b in &self.blocks {
            let m = b.modulation.forward(g, c)?;
            let m = chunks(g, m, 6, d)?;
            let n = modulate(g, h, m[0], m[1])?;
            let a = b.attn.forward(g, n)?;
            let a = g.mul_row(a, m[2])?;
            h = g.add(h, a)?;
            let n = modulate(g, h, m[3], m[4])?;
            let f = b.ff_in.forward(g, n)?;
            let f = g.gelu(f);
            let f = b.ff_out.forward(g, f)?;
            let f = g.mul_row(f, m[5])?;
            h = g.add(h, f)?;
        }

        let m = self.final_modulation.forward(g, c)?;
        let m = chunks(g, m, 2, d)?;
        let n = modulate(g, h, m[0], m[1])?;
        let out = self.head.forward(g, n)?;
        Ok(g.transpose(out)?)
    }
}

//! Conformer CTC classifier conditioned on the diffusion step.
//!
//! A convolution subsamples the spectrogram (stride 2 for characters,
//! stride 1 for phonemes) before a stack of conformer blocks. The step
//! embedding is projected separately for each block and added to its input.
//! The convolution module normalizes with layer norm rather than batch norm
//! so single-utterance batches behave like large ones.

use inpaint_autograd::nn::{Conv1d, Init, LayerNorm, Linear};
use inpaint_autograd::{Graph, ParamStore, Var};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::CtcClassifier;
use crate::audio::N_MELS;
use crate::models::{timestep_embed, SelfAttention};
use crate::{invalid, Error, Real, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformerConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_mult: usize,
    pub conv_kernel: usize,
    /// Time subsampling factor: 2 for characters, 1 for phonemes.
    pub stride: usize,
    pub vocab_size: usize,
}

impl ConformerConfig {
    pub fn character(vocab_size: usize) -> Self {
        Self {
            dim: 144,
            heads: 4,
            blocks: 4,
            ff_mult: 4,
            conv_kernel: 15,
            stride: 2,
            vocab_size,
        }
    }

    pub fn phoneme(vocab_size: usize) -> Self {
        Self {
            stride: 1,
            ..Self::character(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.dim > 0
            && self.dim % 2 == 0
            && self.heads > 0
            && self.dim % self.heads == 0
            && self.ff_mult > 0
            && self.conv_kernel % 2 == 1
            && matches!(self.stride, 1 | 2)
            && self.vocab_size >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid conformer shape {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    norm: LayerNorm,
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    fn new<T: Real>(s: &mut ParamStore<T>, name: &str, dim: usize, mult: usize, rng: &mut dyn RngCore) -> Result<Self> {
        let init = Init::Scaled { gain: 1.0 };
        Ok(Self {
            norm: LayerNorm::new(s, &format!("{name}.norm"), dim)?,
            inner: Linear::new(s, &format!("{name}.inner"), dim, mult * dim, init, rng)?,
            outer: Linear::new(s, &format!("{name}.outer"), mult * dim, dim, init, rng)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = self.inner.forward(g, h)?;
        let h = g.silu(h);
        Ok(self.outer.forward(g, h)?)
    }
}

#[derive(Clone, Debug)]
struct ConvModule {
    norm: LayerNorm,
    pointwise_in: Conv1d,
    depthwise: Conv1d,
    mid_norm: LayerNorm,
    pointwise_out: Conv1d,
    dim: usize,
}

impl ConvModule {
    fn new<T: Real>(s: &mut ParamStore<T>, name: &str, dim: usize, kernel: usize, rng: &mut dyn RngCore) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(s, &format!("{name}.norm"), dim)?,
            pointwise_in: Conv1d::new(s, &format!("{name}.pw_in"), dim, 2 * dim, 1, 1, 0, 1, rng)?,
            depthwise: Conv1d::new(s, &format!("{name}.dw"), dim, dim, kernel, 1, kernel / 2, dim, rng)?,
            mid_norm: LayerNorm::new(s, &format!("{name}.mid_norm"), dim)?,
            pointwise_out: Conv1d::new(s, &format!("{name}.pw_out"), dim, dim, 1, 1, 0, 1, rng)?,
            dim,
        })
    }

    /// `x` is `[L, dim]`.
    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = g.transpose(h)?;
        let h = self.pointwise_in.forward(g, h)?;
        let a = g.slice_rows(h, 0, self.dim)?;
        let b = g.slice_rows(h, self.dim, 2 * self.dim)?;
        let gate = g.sigmoid(b);
        let h = g.mul(a, gate)?;
        let h = self.depthwise.forward(g, h)?;
        let h = g.transpose(h)?;
        let h = self.mid_norm.forward(g, h)?;
        let h = g.silu(h);
        let h = g.transpose(h)?;
        let h = self.pointwise_out.forward(g, h)?;
        Ok(g.transpose(h)?)
    }
}

#[derive(Clone, Debug)]
struct Block {
    time: Linear,
    ff1: FeedForward,
    attn_norm: LayerNorm,
    attn: SelfAttention,
    conv: ConvModule,
    ff2: FeedForward,
    out_norm: LayerNorm,
}

pub struct Conformer<T: Real> {
    store: ParamStore<T>,
    cfg: ConformerConfig,
    subsample: Conv1d,
    time: [Linear; 2],
    blocks: Vec<Block>,
    head: Linear,
}

impl<T: Real> Conformer<T> {
    pub fn new(cfg: ConformerConfig, rng: &mut dyn RngCore) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let init = Init::Scaled { gain: 1.0 };
        let mut store = ParamStore::new();
        let s = &mut store;
        let subsample = Conv1d::new(s, "subsample", N_MELS, d, 3, cfg.stride, 1, 1, rng)?;
        let time = [
            Linear::new(s, "time.0", d, d, init, rng)?,
            Linear::new(s, "time.1", d, d, init, rng)?,
        ];
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let p = format!("block{i}");
                Ok(Block {
                    time: Linear::new(s, &format!("{p}.time"), d, d, init, rng)?,
                    ff1: FeedForward::new(s, &format!("{p}.ff1"), d, cfg.ff_mult, rng)?,
                    attn_norm: LayerNorm::new(s, &format!("{p}.attn_norm"), d)?,
                    attn: SelfAttention::new(s, &format!("{p}.attn"), d, cfg.heads, rng)?,
                    conv: ConvModule::new(s, &format!("{p}.conv"), d, cfg.conv_kernel, rng)?,
                    ff2: FeedForward::new(s, &format!("{p}.ff2"), d, cfg.ff_mult, rng)?,
                    out_norm: LayerNorm::new(s, &format!("{p}.out_norm"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(s, "head", d, cfg.vocab_size, init, rng)?;
        Ok(Self {
            store,
            cfg,
            subsample,
            time,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ConformerConfig {
        &self.cfg
    }
}

impl<T: Real> CtcClassifier<T> for Conformer<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn output_frames(&self, frames: usize) -> usize {
        frames / self.cfg.stride
    }

    fn forward(&self, g: &mut Graph<'_, T>, x: Var, t: usize) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != N_MELS {
            return invalid(format!("classifier input must be [{N_MELS}, L], got {shape:?}"));
        }
        let out_frames = self.output_frames(shape[1]);
        if out_frames == 0 {
            return invalid(format!("{} frames are too few for stride {}", shape[1], self.cfg.stride));
        }
        let h = self.subsample.forward(g, x)?;
        let h = g.resize_last(h, out_frames)?;
        let h = g.silu(h);
        let mut h = g.transpose(h)?;

        let emb = g.constant(timestep_embed(t, self.cfg.dim)?);
        let c = self.time[0].forward(g, emb)?;
        let c = g.silu(c);
        let c = self.time[1].forward(g, c)?;
        let c = g.silu(c);

        let half = T::lit(0.5);
        for b in &self.blocks {
            let tb = b.time.forward(g, c)?;
            h = g.add_row(h, tb)?;
            let f = b.ff1.forward(g, h)?;
            let f = g.scale(f, half);
            h = g.add(h, f)?;
            let a = b.attn_norm.forward(g, h)?;
            let a = b.attn.forward(g, a)?;
            h = g.add(h, a)?;
            let cv = b.conv.forward(g, h)?;
            h = g.add(h, cv)?;
            let f = b.ff2.forward(g, h)?;
            let f = g.scale(f, half);
            h = g.add(h, f)?;
            h = b.out_norm.forward(g, h)?;
        }
        let logits = self.head.forward(g, h)?;
        Ok(g.log_softmax(logits))
    }
}

use inpaint_autograd::nn::{Init, Linear};
use inpaint_autograd::{Graph, ParamStore, Var};
use rand::RngCore;

use crate::{Error, Real, Result};

/// Multi-head self-attention over `[L, dim]` token rows.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl SelfAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{dim} channels do not split into {heads} heads")));
        }
        let init = Init::Scaled { gain: 1.0 };
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, init, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, init, rng)?,
            heads,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let qkv = self.qkv.forward(g, x)?;
        let dh = self.dim / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * dh, (h + 1) * dh)?;
            let k = g.slice_cols(qkv, self.dim + h * dh, self.dim + (h + 1) * dh)?;
            let v = g.slice_cols(qkv, 2 * self.dim + h * dh, 2 * self.dim + (h + 1) * dh)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            heads.push(g.matmul(attn, v)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        Ok(self.out.forward(g, merged)?)
    }
}

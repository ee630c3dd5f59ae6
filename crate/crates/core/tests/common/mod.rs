#![allow(dead_code)]

use inpaint_core::guidance::{Conformer, ConformerConfig};
use inpaint_core::models::{Denoiser, Dit, DitConfig};
use inpaint_core::{randn, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A small transformer denoiser with every weight jittered, so that its
/// zero-initialized gates and head produce nonzero output.
pub fn jittered_dit<T: Real>(seed: u64) -> Dit<T> {
    let cfg = DitConfig {
        dim: 16,
        heads: 2,
        blocks: 1,
        ff_mult: 2,
        pos_kernel: 3,
        masked_loss_weight: 0.8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dit = Dit::new(cfg, &mut rng).unwrap();
    let ids: Vec<_> = dit.params().ids().collect();
    for id in ids {
        let p = dit.params_mut().get_mut(id);
        let noise: Tensor<T> = randn(p.shape(), &mut rng);
        *p = p.add(&noise.scale(T::lit(0.05))).unwrap();
    }
    dit
}

pub fn small_phoneme_classifier<T: Real>(seed: u64) -> Conformer<T> {
    let cfg = ConformerConfig {
        dim: 8,
        heads: 2,
        blocks: 1,
        ff_mult: 2,
        conv_kernel: 3,
        stride: 1,
        vocab_size: 4,
    };
    Conformer::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// A `[80, frames]` spectrogram-like tensor in `[-1, 1]`.
pub fn random_mel<T: Real>(frames: usize, seed: u64) -> Tensor<T> {
    let z: Tensor<T> = randn(&[80, frames], &mut ChaCha8Rng::seed_from_u64(seed));
    z.map(|v| v.tanh())
}

//! Waveform conditioning for the U-Net.
//!
//! A [`WaveEncoder`] turns `L * 160` samples into one or more feature maps
//! at half the frame rate (`max(1, floor(L / 2))` columns). The
//! [`WaveConditioner`] mixes those maps with learned softmax weights and
//! doubles the time axis with a stride-2 transposed convolution, cropping
//! or padding the result to exactly `L` frames.
//!
//! Encoders are created by name through an [`EncoderRegistry`].

use std::collections::BTreeMap;

use inpaint_autograd::nn::{Conv1d, ConvTranspose1d};
use inpaint_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::RngCore;

use crate::audio::HOP;
use crate::{invalid, Error, Real, Result};

/// Frame count of an encoder's output for `frames` spectrogram frames.
pub fn half_rate(frames: usize) -> usize {
    (frames / 2).max(1)
}

/// A waveform feature extractor at half the spectrogram frame rate.
pub trait WaveEncoder<T: Real>: Send + Sync {
    fn name(&self) -> &str;

    /// Channels of every returned layer.
    fn dim(&self) -> usize;

    /// Layer outputs, each `[dim, half_rate(frames)]`. `wave` is `[1, frames * 160]`.
    fn encode(&self, g: &mut Graph<'_, T>, wave: Var, frames: usize) -> Result<Vec<Var>>;
}

/// Builds an encoder with parameters named under `prefix` in `store`.
pub type EncoderCtor<T> = fn(&mut ParamStore<T>, &str, &mut dyn RngCore) -> Result<Box<dyn WaveEncoder<T>>>;

/// Named encoder constructors.
pub struct EncoderRegistry<T: Real> {
    ctors: BTreeMap<String, EncoderCtor<T>>,
}

impl<T: Real> EncoderRegistry<T> {
    pub fn empty() -> Self {
        Self { ctors: BTreeMap::new() }
    }

    /// `conv` ([`ConvEncoder`]) and `energy` ([`EnergyEncoder`]).
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register("conv", ConvEncoder::boxed).expect("fresh registry");
        r.register("energy", EnergyEncoder::boxed).expect("fresh registry");
        r
    }

    pub fn register(&mut self, name: &str, ctor: EncoderCtor<T>) -> Result<()> {
        if self.ctors.contains_key(name) {
            return Err(Error::Config(format!("encoder `{name}` is already registered")));
        }
        self.ctors.insert(name.to_string(), ctor);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ctors.keys().map(String::as_str)
    }

    pub fn build(
        &self,
        name: &str,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut dyn RngCore,
    ) -> Result<Box<dyn WaveEncoder<T>>> {
        let ctor = self.ctors.get(name).ok_or_else(|| {
            let known: Vec<_> = self.names().collect();
            Error::Config(format!("unknown encoder `{name}`; registered: {known:?}"))
        })?;
        ctor(store, prefix, rng)
    }
}

/// Strided convolutions down to half the frame rate (total stride 320),
/// followed by three context layers whose outputs are all exposed.
pub struct ConvEncoder {
    stem: Vec<Conv1d>,
    context: Vec<Conv1d>,
    dim: usize,
}

impl ConvEncoder {
    pub const DIM: usize = 16;

    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, rng: &mut dyn RngCore) -> Result<Self> {
        let d = Self::DIM;
        // (c_in, kernel, stride): 5 * 4 * 4 * 4 = 320 samples per column
        let plan = [(1, 10, 5), (d, 8, 4), (d, 4, 4), (d, 4, 4)];
        let stem = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, k, s))| Conv1d::new(store, &format!("{prefix}.stem{i}"), cin, d, k, s, (k - s) / 2, 1, rng))
            .collect::<inpaint_autograd::Result<Vec<_>>>()?;
        let context = (0..3)
            .map(|i| Conv1d::new(store, &format!("{prefix}.ctx{i}"), d, d, 3, 1, 1, 1, rng))
            .collect::<inpaint_autograd::Result<Vec<_>>>()?;
        Ok(Self { stem, context, dim: d })
    }

    fn boxed<T: Real>(store: &mut ParamStore<T>, prefix: &str, rng: &mut dyn RngCore) -> Result<Box<dyn WaveEncoder<T>>> {
        Ok(Box::new(Self::new(store, prefix, rng)?))
    }
}

impl<T: Real> WaveEncoder<T> for ConvEncoder {
    fn name(&self) -> &str {
        "conv"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, g: &mut Graph<'_, T>, wave: Var, frames: usize) -> Result<Vec<Var>> {
        let mut h = wave;
        for conv in &self.stem {
            let w = g.param(conv.weight);
            let k = g.shape(w)[2];
            if g.shape(h)[1] + 2 * conv.pad < k {
                h = g.resize_last(h, k)?;
            }
            h = conv.forward(g, h)?;
            h = g.gelu(h);
        }
        let mut h = g.resize_last(h, half_rate(frames))?;
        let mut layers = Vec::with_capacity(self.context.len());
        for conv in &self.context {
            let c = conv.forward(g, h)?;
            let c = g.gelu(c);
            h = g.add(h, c)?;
            layers.push(h);
        }
        Ok(layers)
    }
}

/// Log-energy and mean magnitude per 320-sample block, mixed by a 1x1
/// convolution. A single-layer encoder.
pub struct EnergyEncoder {
    proj: Conv1d,
}

impl EnergyEncoder {
    pub const DIM: usize = 8;

    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, rng: &mut dyn RngCore) -> Result<Self> {
        Ok(Self {
            proj: Conv1d::new(store, &format!("{prefix}.proj"), 2, Self::DIM, 1, 1, 0, 1, rng)?,
        })
    }

    fn boxed<T: Real>(store: &mut ParamStore<T>, prefix: &str, rng: &mut dyn RngCore) -> Result<Box<dyn WaveEncoder<T>>> {
        Ok(Box::new(Self::new(store, prefix, rng)?))
    }
}

impl<T: Real> WaveEncoder<T> for EnergyEncoder {
    fn name(&self) -> &str {
        "energy"
    }

    fn dim(&self) -> usize {
        Self::DIM
    }

    fn encode(&self, g: &mut Graph<'_, T>, wave: Var, frames: usize) -> Result<Vec<Var>> {
        let cols = half_rate(frames);
        let samples = g.value(wave).data().to_vec();
        let block = 2 * HOP;
        let mut feats = Tensor::zeros(&[2, cols]);
        for j in 0..cols {
            let seg = samples.get(j * block..((j + 1) * block).min(samples.len())).unwrap_or(&[]);
            let n = T::lit(seg.len().max(1) as f64);
            let energy = seg.iter().map(|&s| s * s).sum::<T>() / n;
            let mag = seg.iter().map(|s| s.abs()).sum::<T>() / n;
            feats.set(0, j, (energy + T::lit(1e-5)).ln());
            feats.set(1, j, mag);
        }
        let f = g.constant(feats);
        Ok(vec![self.proj.forward(g, f)?])
    }
}

/// Encoder, learned layer mixing and the upsampling back to `L` frames.
pub struct WaveConditioner<T: Real> {
    encoder: Box<dyn WaveEncoder<T>>,
    layer_logits: Option<ParamId>,
    upsample: ConvTranspose1d,
    out_dim: usize,
}

impl<T: Real> WaveConditioner<T> {
    pub fn new(
        registry: &EncoderRegistry<T>,
        encoder: &str,
        store: &mut ParamStore<T>,
        prefix: &str,
        out_dim: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let encoder = registry.build(encoder, store, &format!("{prefix}.enc"), rng)?;
        let layers = {
            let mut probe = Graph::with_params(store, false);
            let w = probe.constant(Tensor::zeros(&[1, 2 * HOP]));
            encoder.encode(&mut probe, w, 2)?.len()
        };
        if layers == 0 {
            return invalid(format!("encoder `{}` returned no layers", encoder.name()));
        }
        let layer_logits = if layers > 1 {
            Some(store.add(format!("{prefix}.layer_logits"), Tensor::zeros(&[1, layers]))?)
        } else {
            None
        };
        let upsample = ConvTranspose1d::new(store, &format!("{prefix}.up"), encoder.dim(), out_dim, 3, 2, rng)?;
        Ok(Self {
            encoder,
            layer_logits,
            upsample,
            out_dim,
        })
    }

    pub fn encoder_name(&self) -> &str {
        self.encoder.name()
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Mixed encoder layers at half rate, `[dim, half_rate(frames)]`.
    pub fn half_rate_features(&self, g: &mut Graph<'_, T>, wave: &[T], frames: usize) -> Result<Var> {
        let mut samples = wave.to_vec();
        samples.resize(frames * HOP, T::zero());
        let w = g.constant(Tensor::from_vec(&[1, frames * HOP], samples)?);
        let layers = self.encoder.encode(g, w, frames)?;
        let cols = half_rate(frames);
        for &l in &layers {
            if g.shape(l) != [self.encoder.dim(), cols] {
                return invalid(format!(
                    "encoder `{}` produced {:?}, expected [{}, {cols}]",
                    self.encoder.name(),
                    g.shape(l),
                    self.encoder.dim()
                ));
            }
        }
        match self.layer_logits {
            None => Ok(layers[0]),
            Some(id) => {
                let logits = g.param(id);
                let weights = g.softmax(logits);
                let size = self.encoder.dim() * cols;
                let flat = layers
                    .iter()
                    .map(|&l| Ok(g.reshape(l, &[1, size])?))
                    .collect::<Result<Vec<_>>>()?;
                let stacked = g.concat_rows(&flat)?;
                let mixed = g.matmul(weights, stacked)?;
                Ok(g.reshape(mixed, &[self.encoder.dim(), cols])?)
            }
        }
    }

    /// Features `[out_dim, frames]`.
    pub fn forward(&self, g: &mut Graph<'_, T>, wave: &[T], frames: usize) -> Result<Var> {
        let h = self.half_rate_features(g, wave, frames)?;
        let up = self.upsample.forward(g, h)?;
        Ok(g.resize_last(up, frames)?)
    }
}

//! Parameterized layers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Graph, ParamId, ParamStore, Result, Scalar, Tensor, Var};

/// How a freshly created weight is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Scaled { gain: f64 },
}

pub fn init_tensor<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    init: Init,
    rng: &mut R,
) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Scaled { gain } => {
            let std = gain / (fan_in.max(1) as f64).sqrt();
            Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
        }
    }
}

/// `y = x W + b` on `[n, in]` inputs.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&[in_dim, out_dim], in_dim, init, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Row-wise layer normalization with a learned scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, T::lit(self.eps));
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma)?;
        g.add_row(y, beta)
    }
}

/// 1-D convolution over `[channels, time]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let cig = c_in / groups.max(1);
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&[c_out, cig, kernel], cig * kernel, Init::Scaled { gain: 1.0 }, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
            groups,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv1d(x, w, Some(b), self.stride, self.pad, self.groups)
    }
}

/// Transposed 1-D convolution over `[channels, time]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose1d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&[c_in, c_out, kernel], c_in * kernel / stride.max(1), Init::Scaled { gain: 1.0 }, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self { weight, bias, stride })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv_transpose1d(x, w, Some(b), self.stride)
    }
}

/// 2-D convolution over `[channels, height, width]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel, init, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Group normalization over `[channels, ...]` with per-channel affine.
#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            groups,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let n = g.value(x).len();
        let grouped = g.reshape(x, &[self.groups, n / self.groups])?;
        let normed = g.layer_norm(grouped, T::lit(1e-5));
        let back = g.reshape(normed, &shape)?;
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_col(back, gamma)?;
        g.add_col(y, beta)
    }
}

/// Largest of 8, 4, 2, 1 dividing `channels`.
pub fn group_count(channels: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

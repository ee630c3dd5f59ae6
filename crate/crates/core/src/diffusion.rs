//! Noise schedule, forward noising and the denoiser training objective.
//!
//! The forward process mixes a clean spectrogram with Gaussian noise,
//! `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`, and the denoiser learns
//! to recover `eps`. During training the conditioning input is replaced by
//! zeros with probability `1 - cond_keep_prob` so the same network also
//! provides the unconditional prediction used by classifier-free guidance.

use inpaint_autograd::{Graph, ParamGrads, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::mask::FrameMask;
use crate::models::{ConditionInput, Denoiser};
use crate::{invalid, randn, Error, Real, Result, Tensor};

/// Variance used for the noise added by each reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaKind {
    /// `sigma_t = sqrt(beta_t)`.
    #[default]
    Beta,
    /// `sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)`.
    Posterior,
}

/// A linear beta ramp, serializable alongside checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    #[serde(default)]
    pub sigma: SigmaKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            sigma: SigmaKind::Beta,
        }
    }
}

impl ScheduleConfig {
    /// The 1000-step ramp compressed to `steps` steps: both endpoints are
    /// multiplied by `1000 / steps` so the total noise stays comparable.
    pub fn rescaled(steps: usize) -> Self {
        let k = 1000.0 / steps.max(1) as f64;
        Self {
            steps,
            beta_min: (1e-4 * k).min(0.999),
            beta_max: (0.02 * k).min(0.999),
            sigma: SigmaKind::Beta,
        }
    }

    pub fn build<T: Real>(&self) -> Result<DiffusionSchedule<T>> {
        Ok(DiffusionSchedule::linear(self.steps, self.beta_min, self.beta_max)?.with_sigma(self.sigma))
    }
}

/// Per-step `beta`, `alpha`, `abar` and `sigma` for `t = 0..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule<T> {
    betas: Vec<f64>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
    sigmas: Vec<T>,
    sigma_kind: SigmaKind,
}

/// Linear schedule with `sigma_t = sqrt(beta_t)`.
pub fn make_schedule<T: Real>(steps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule<T>> {
    DiffusionSchedule::linear(steps, beta_min, beta_max)
}

impl<T: Real> DiffusionSchedule<T> {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("a schedule needs at least one step".into()));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < {beta_min} <= {beta_max} < 1"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(&betas, SigmaKind::Beta)
    }

    /// A schedule from explicit betas, each in `(0, 1)`.
    pub fn from_betas(betas: &[f64], sigma_kind: SigmaKind) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        Ok(Self::from_betas_unchecked(betas, sigma_kind))
    }

    /// Like [`DiffusionSchedule::from_betas`] without range checks, for
    /// degenerate schedules in tests.
    pub fn from_betas_unchecked(betas: &[f64], sigma_kind: SigmaKind) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let sigmas: Vec<f64> = (0..betas.len())
            .map(|t| match sigma_kind {
                SigmaKind::Beta => betas[t].sqrt(),
                SigmaKind::Posterior if t == 0 => 0.0,
                SigmaKind::Posterior => (betas[t] * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t])).sqrt(),
            })
            .collect();
        Self {
            betas: betas.to_vec(),
            alphas: betas.iter().map(|b| T::lit(1.0 - b)).collect(),
            alpha_bars: alpha_bars.into_iter().map(T::lit).collect(),
            sigmas: sigmas.into_iter().map(T::lit).collect(),
            sigma_kind,
        }
    }

    pub fn with_sigma(self, kind: SigmaKind) -> Self {
        if kind == self.sigma_kind {
            self
        } else {
            Self::from_betas_unchecked(&self.betas, kind)
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn sigma_kind(&self) -> SigmaKind {
        self.sigma_kind
    }

    pub fn beta(&self, t: usize) -> T {
        T::lit(self.betas[t])
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bars[t]
    }

    pub fn sigma(&self, t: usize) -> T {
        self.sigmas[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return invalid(format!("step {t} outside [0, {})", self.steps()));
        }
        Ok(())
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_noise<T: Real>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, sch: &DiffusionSchedule<T>) -> Result<Tensor<T>> {
    sch.check_step(t)?;
    let ab = sch.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
}

/// Denoiser training settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub cond_keep_prob: f64,
    /// Share of the loss given to masked frames; `None` weighs all entries
    /// equally. Left unset, the model's own preference applies.
    #[serde(default)]
    pub masked_loss_weight: Option<f64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cond_keep_prob: 0.8,
            masked_loss_weight: None,
            batch_size: 32,
            learning_rate: 2e-4,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(self.cond_keep_prob) || !self.masked_loss_weight.is_none_or(prob_ok) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Loss weights over a `[bins, L]` grid summing to one.
///
/// With `masked_weight = Some(p)`, masked entries share `p` and observed
/// entries share `1 - p`; if either region is empty every entry gets the
/// same weight.
pub fn region_weights<T: Real>(mask: &FrameMask, bins: usize, masked_weight: Option<f64>) -> Tensor<T> {
    let l = mask.len();
    let n_masked = mask.masked_count() * bins;
    let n_obs = l * bins - n_masked;
    let uniform = T::lit(1.0 / (l * bins) as f64);
    match masked_weight {
        Some(p) if n_masked > 0 && n_obs > 0 => {
            let wm = T::lit(p / n_masked as f64);
            let wo = T::lit((1.0 - p) / n_obs as f64);
            Tensor::from_fn(&[bins, l], |i| if mask.is_observed(i % l) { wo } else { wm })
        }
        _ => Tensor::full(&[bins, l], uniform),
    }
}

/// `sum(w * (pred - target)^2)`.
pub fn weighted_mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, weights: &Tensor<T>) -> Result<T> {
    let sq = pred.zip_map(target, |a, b| (a - b) * (a - b))?;
    Ok(sq.zip_map(weights, |s, w| s * w)?.sum())
}

/// One clean training utterance with its mask.
#[derive(Clone, Debug)]
pub struct TrainExample<T> {
    pub x0: MelSpectrogram<T>,
    /// Unmasked waveform, for models conditioned on audio.
    pub wave: Option<Vec<T>>,
    pub mask: FrameMask,
}

impl<T: Real> TrainExample<T> {
    pub fn condition(&self) -> Result<ConditionInput<T>> {
        ConditionInput::observed(self.x0.values(), &self.mask, self.wave.as_deref())
    }
}

/// The random quantities of one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossDraw<T> {
    pub t: usize,
    pub keep_cond: bool,
    pub eps: Tensor<T>,
}

impl<T: Real> LossDraw<T> {
    pub fn sample<R: Rng + ?Sized>(shape: &[usize], steps: usize, keep_prob: f64, rng: &mut R) -> Self {
        let t = rng.random_range(0..steps);
        let keep_cond = rng.random::<f64>() < keep_prob;
        let eps = randn(shape, rng);
        Self { t, keep_cond, eps }
    }
}

/// Records the loss of a single example on `g`.
pub fn loss_graph<T: Real, D: Denoiser<T> + ?Sized>(
    g: &mut Graph<'_, T>,
    model: &D,
    example: &TrainExample<T>,
    draw: &LossDraw<T>,
    sch: &DiffusionSchedule<T>,
    masked_weight: Option<f64>,
) -> Result<Var> {
    let x0 = example.x0.values();
    if example.mask.len() != x0.cols() {
        return invalid("mask length does not match the spectrogram");
    }
    let x_t = forward_noise(x0, draw.t, &draw.eps, sch)?;
    let cond = example.condition()?;
    let cond = if draw.keep_cond { cond } else { cond.null_like() };
    let x = g.constant(x_t);
    let pred = model.forward(g, x, &cond, draw.t)?;
    let target = g.constant(draw.eps.clone());
    let weights = g.constant(region_weights(&example.mask, x0.rows(), masked_weight));
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    let weighted = g.mul(sq, weights)?;
    Ok(g.sum(weighted))
}

/// Outcome of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossSample<T> {
    pub loss: T,
    pub t: usize,
    pub conditioned: bool,
}

fn masked_weight_for<T: Real, D: Denoiser<T> + ?Sized>(model: &D, cfg: &TrainConfig) -> Option<f64> {
    cfg.masked_loss_weight.or(model.masked_loss_weight())
}

/// Draws `t`, the dropout decision and `eps`, and evaluates the loss.
pub fn training_loss<T: Real, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    model: &D,
    example: &TrainExample<T>,
    sch: &DiffusionSchedule<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossSample<T>> {
    let draw = LossDraw::sample(example.x0.values().shape(), sch.steps(), cfg.cond_keep_prob, rng);
    let mut g = Graph::with_params(model.params(), false);
    let loss = loss_graph(&mut g, model, example, &draw, sch, masked_weight_for(model, cfg))?;
    Ok(LossSample {
        loss: g.value(loss).data()[0],
        t: draw.t,
        conditioned: draw.keep_cond,
    })
}

/// Mean loss and parameter gradients over a batch.
pub fn batch_gradients<T: Real, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    model: &D,
    batch: &[TrainExample<T>],
    sch: &DiffusionSchedule<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(T, ParamGrads<T>)> {
    if batch.is_empty() {
        return invalid("empty training batch");
    }
    let weight = masked_weight_for(model, cfg);
    let mut total = T::zero();
    let mut grads = ParamGrads::empty(model.params().len());
    for ex in batch {
        let draw = LossDraw::sample(ex.x0.values().shape(), sch.steps(), cfg.cond_keep_prob, rng);
        let mut g = Graph::with_params(model.params(), true);
        let loss = loss_graph(&mut g, model, ex, &draw, sch, weight)?;
        total += g.value(loss).data()[0];
        let back = g.backward(loss)?;
        grads.accumulate(&g.param_grads(&back))?;
    }
    let inv = T::one() / T::lit(batch.len() as f64);
    grads.scale(inv);
    Ok((total * inv, grads))
}

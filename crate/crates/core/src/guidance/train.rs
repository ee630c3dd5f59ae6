//! Classifier training on noised spectrograms.

use inpaint_autograd::optim::{Adam, AdamConfig};
use inpaint_autograd::{Graph, ParamGrads};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ctc_loss_and_grad, CtcClassifier, TokenSequence, BLANK};
use crate::diffusion::{forward_noise, DiffusionSchedule};
use crate::{invalid, randn, Error, Real, Result, Tensor};

/// A clean normalized spectrogram `[80, L]` and its transcript.
#[derive(Clone, Debug)]
pub struct ClassifierExample<T> {
    pub x0: Tensor<T>,
    pub tokens: TokenSequence,
}

/// How training picks the diffusion step of each example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSampling {
    /// Uniform over `[0, T)`.
    #[default]
    Uniform,
    /// Always the given step.
    Fixed(usize),
}

impl StepSampling {
    fn draw<R: Rng + ?Sized>(self, steps: usize, rng: &mut R) -> usize {
        match self {
            Self::Uniform => rng.random_range(0..steps),
            Self::Fixed(t) => t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub steps: StepSampling,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            steps: StepSampling::Uniform,
            clip_norm: Some(5.0),
        }
    }
}

/// Mean CTC loss and parameter gradients over a batch. Examples whose
/// transcript cannot be aligned are left out; the third value counts them.
pub fn classifier_batch_gradients<T: Real, C: CtcClassifier<T> + ?Sized, R: Rng + ?Sized>(
    clf: &C,
    batch: &[&ClassifierExample<T>],
    sch: &DiffusionSchedule<T>,
    steps: StepSampling,
    rng: &mut R,
) -> Result<(T, ParamGrads<T>, usize)> {
    let mut grads = ParamGrads::empty(clf.params().len());
    let mut total = T::zero();
    let mut used = 0usize;
    for ex in batch {
        let t = steps.draw(sch.steps(), rng);
        let eps = randn(ex.x0.shape(), rng);
        let x_t = forward_noise(&ex.x0, t, &eps, sch)?;
        let mut g = Graph::with_params(clf.params(), true);
        let x = g.constant(x_t);
        let lp = clf.forward(&mut g, x, t)?;
        let out = ctc_loss_and_grad(g.value(lp), ex.tokens.ids(), BLANK)?;
        let Some(dloss) = out.grad else {
            continue;
        };
        let loss = g.custom_scalar(lp, out.loss, dloss)?;
        let back = g.backward(loss)?;
        grads.accumulate(&g.param_grads(&back))?;
        total += out.loss;
        used += 1;
    }
    if used > 0 {
        let inv = T::one() / T::lit(used as f64);
        grads.scale(inv);
        total *= inv;
    }
    Ok((total, grads, batch.len() - used))
}

/// Mean CTC loss over `data` at steps drawn by `steps`.
pub fn evaluate_classifier<T: Real, C: CtcClassifier<T> + ?Sized, R: Rng + ?Sized>(
    clf: &C,
    data: &[ClassifierExample<T>],
    sch: &DiffusionSchedule<T>,
    steps: StepSampling,
    rng: &mut R,
) -> Result<T> {
    if data.is_empty() {
        return invalid("empty evaluation set");
    }
    let mut total = T::zero();
    for ex in data {
        let t = steps.draw(sch.steps(), rng);
        let eps = randn(ex.x0.shape(), rng);
        let x_t = forward_noise(&ex.x0, t, &eps, sch)?;
        let lp = super::classifier_forward(clf, &x_t, t)?;
        total += ctc_loss_and_grad(&lp, ex.tokens.ids(), BLANK)?.loss;
    }
    Ok(total / T::lit(data.len() as f64))
}

/// Trains `clf` in place and returns the mean training loss of each epoch.
pub fn train_classifier<T: Real, C: CtcClassifier<T> + ?Sized, R: Rng + ?Sized>(
    clf: &mut C,
    data: &[ClassifierExample<T>],
    sch: &DiffusionSchedule<T>,
    cfg: &ClassifierTrainConfig,
    rng: &mut R,
) -> Result<Vec<T>> {
    if data.is_empty() {
        return invalid("empty classifier training set");
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            clip_norm: cfg.clip_norm,
            ..AdamConfig::default()
        },
        clf.params(),
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut sum = T::zero();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ClassifierExample<T>> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads, skipped) = classifier_batch_gradients(&*clf, &batch, sch, cfg.steps, rng)?;
            if skipped == batch.len() {
                continue;
            }
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Numerical(format!("classifier loss diverged in epoch {epoch}")));
            }
            opt.step(clf.params_mut(), &grads)?;
            sum += loss;
            batches += 1;
        }
        if batches == 0 {
            return invalid("no transcript in the training set fits its spectrogram");
        }
        history.push(sum / T::lit(batches as f64));
    }
    Ok(history)
}

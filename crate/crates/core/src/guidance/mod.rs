//! Transcript guidance.
//!
//! A CTC classifier trained on noisy spectrograms scores how well the
//! current sample matches a target token sequence. During sampling the
//! gradient of that log-probability with respect to the input shifts the
//! noise estimate:
//!
//! ```text
//! eps_hat = eps_cfg - w2 * gamma * sigma_t * grad
//! gamma   = sqrt(|eps_cfg|_F) / (sigma_t * |grad|_F)
//! ```
//!
//! so the applied shift always has Frobenius norm `w2 * sqrt(|eps_cfg|_F)`
//! and only the gradient's direction matters.

mod conformer;
mod ctc;
mod train;
mod vocab;

use inpaint_autograd::{Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

pub use conformer::{Conformer, ConformerConfig};
pub use ctc::{ctc_loss, ctc_loss_and_grad, greedy_decode, required_frames, CtcOutput};
pub use train::{
    classifier_batch_gradients, evaluate_classifier, train_classifier, ClassifierExample, ClassifierTrainConfig,
    StepSampling,
};
pub use vocab::{TokenSequence, Vocab, VocabKind, BLANK};

use crate::{Error, Real, Result, Tensor};

/// Which transcript the classifier scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    Asr,
    Phoneme,
    #[default]
    None,
}

/// Guidance weights and gate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Classifier-free weight: `(1 + w1) eps_cond - w1 eps_uncond`.
    pub w1: f64,
    /// Classifier weight.
    pub w2: f64,
    /// Classifier guidance runs for `t <= t_asr_start`; half the step
    /// count when unset.
    #[serde(default)]
    pub t_asr_start: Option<usize>,
    #[serde(default)]
    pub mode: GuidanceMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w1: 0.0,
            w2: 0.0,
            t_asr_start: None,
            mode: GuidanceMode::None,
        }
    }
}

impl GuidanceConfig {
    pub fn unguided(w1: f64) -> Self {
        Self {
            w1,
            ..Self::default()
        }
    }

    pub fn guided(w1: f64, w2: f64, mode: GuidanceMode) -> Self {
        Self {
            w1,
            w2,
            t_asr_start: None,
            mode,
        }
    }

    /// The last step at which classifier guidance applies.
    pub fn start_step(&self, steps: usize) -> Result<usize> {
        let s = self.t_asr_start.unwrap_or(steps / 2);
        if s >= steps {
            return Err(Error::Config(format!("t_asr_start {s} outside [0, {steps})")));
        }
        Ok(s)
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.w1.is_finite() && self.w2.is_finite()) {
            return Err(Error::Config("guidance weights must be finite".into()));
        }
        self.start_step(steps).map(|_| ())
    }
}

/// A classifier emitting per-frame log-probabilities over a vocabulary.
pub trait CtcClassifier<T: Real> {
    fn params(&self) -> &ParamStore<T>;

    fn params_mut(&mut self) -> &mut ParamStore<T>;

    fn vocab_size(&self) -> usize;

    /// Output frames for `frames` input frames.
    fn output_frames(&self, frames: usize) -> usize;

    /// Records `[L', V]` log-probabilities for an `[80, L]` input on `g`,
    /// which must read this classifier's parameter store.
    fn forward(&self, g: &mut Graph<'_, T>, x: Var, t: usize) -> Result<Var>;
}

/// Log-probabilities without gradient tracking.
pub fn classifier_forward<T: Real, C: CtcClassifier<T> + ?Sized>(clf: &C, x: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let mut g = Graph::with_params(clf.params(), false);
    let xv = g.constant(x.clone());
    let lp = clf.forward(&mut g, xv, t)?;
    Ok(g.value(lp).clone())
}

/// `ln p(y | x)`, the negated CTC loss; `-inf` when `y` cannot be aligned.
pub fn classifier_logprob<T: Real, C: CtcClassifier<T> + ?Sized>(
    clf: &C,
    x: &Tensor<T>,
    y: &TokenSequence,
    t: usize,
) -> Result<T> {
    Ok(-ctc_loss(&classifier_forward(clf, x, t)?, y.ids(), BLANK)?)
}

/// Gradient of `ln p(y | x)` with respect to every input entry.
#[derive(Clone, Debug)]
pub struct GuidanceGradient<T> {
    pub grad: Tensor<T>,
    pub log_prob: T,
    /// Set when the target cannot be aligned; `grad` is then zero.
    pub skipped: bool,
}

pub fn guidance_gradient<T: Real, C: CtcClassifier<T> + ?Sized>(
    clf: &C,
    x: &Tensor<T>,
    y: &TokenSequence,
    t: usize,
) -> Result<GuidanceGradient<T>> {
    let mut g = Graph::with_params(clf.params(), false);
    let xv = g.variable(x.clone());
    let lp = clf.forward(&mut g, xv, t)?;
    let out = ctc_loss_and_grad(g.value(lp), y.ids(), BLANK)?;
    let Some(dloss) = out.grad else {
        log::warn!(
            "transcript of {} tokens cannot align to {} classifier frames; guidance skipped",
            y.len(),
            g.shape(lp)[0]
        );
        return Ok(GuidanceGradient {
            grad: Tensor::zeros(x.shape()),
            log_prob: T::neg_infinity(),
            skipped: true,
        });
    };
    let loss = g.custom_scalar(lp, out.loss, dloss)?;
    let logp = g.scale(loss, -T::one());
    let mut grads = g.backward(logp)?;
    let grad = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok(GuidanceGradient {
        grad,
        log_prob: -out.loss,
        skipped: false,
    })
}

/// Gradient normalization `sqrt(|eps_cfg|_F) / (sigma * |grad|_F)`;
/// `None` when the gradient is numerically zero.
pub fn gamma<T: Real>(eps_cfg: &Tensor<T>, grad: &Tensor<T>, sigma: T) -> Option<T> {
    let gn = grad.norm();
    if !(gn.as_f64() >= 1e-12) || !(sigma > T::zero()) {
        return None;
    }
    Some(eps_cfg.norm().sqrt() / (sigma * gn))
}

/// `eps_cfg - w2 * gamma * sigma * grad` and whether guidance applied.
pub fn guided_noise<T: Real>(eps_cfg: &Tensor<T>, grad: &Tensor<T>, sigma: T, w2: T) -> Result<(Tensor<T>, bool)> {
    eps_cfg.check_same_shape(grad)?;
    match gamma(eps_cfg, grad, sigma) {
        Some(gm) => {
            let k = w2 * gm * sigma;
            Ok((eps_cfg.zip_map(grad, |e, d| e - k * d)?, true))
        }
        None => Ok((eps_cfg.clone(), false)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_closed_form() {
        let eps = Tensor::from_vec(&[2], vec![4.0f64, 0.0]).unwrap();
        let grad = Tensor::from_vec(&[2], vec![0.0f64, 2.0]).unwrap();
        assert!((gamma(&eps, &grad, 0.5).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(gamma(&Tensor::zeros(&[2]), &grad, 0.5), Some(0.0));
        assert_eq!(gamma(&eps, &Tensor::zeros(&[2]), 0.5), None);
    }

    #[test]
    fn guided_noise_magnitude_and_symmetry() {
        let eps = Tensor::from_vec(&[3], vec![9.0f64, 0.0, 0.0]).unwrap();
        let grad = Tensor::from_vec(&[3], vec![0.3f64, -1.2, 0.5]).unwrap();
        let (out, applied) = guided_noise(&eps, &grad, 0.7, 2.0).unwrap();
        assert!(applied);
        assert!((out.sub(&eps).unwrap().norm() - 6.0).abs() < 1e-12);
        let (neg, _) = guided_noise(&eps, &grad.scale(-1.0), 0.7, 2.0).unwrap();
        let mid = out.add(&neg).unwrap().scale(0.5);
        assert!(mid.sub(&eps).unwrap().max_abs() < 1e-12);
        let (same, _) = guided_noise(&eps, &grad, 0.7, 0.0).unwrap();
        assert_eq!(same, eps);
    }

    #[test]
    fn start_step_defaults_to_half() {
        let g = GuidanceConfig::guided(0.0, 1.0, GuidanceMode::Phoneme);
        assert_eq!(g.start_step(50).unwrap(), 25);
        let bad = GuidanceConfig {
            t_asr_start: Some(50),
            ..g
        };
        assert!(bad.start_step(50).is_err());
    }
}

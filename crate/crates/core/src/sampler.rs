//! Guided reverse diffusion for inpainting.
//!
//! Each step re-noises the observed frames to the current level, keeps the
//! model's own sample on the missing frames, and takes one ancestral step
//! with the combined noise estimate:
//!
//! ```text
//! x_in  = noise(x_m, t) * m + x_prev * (1 - m)
//! eps   = (1 + w1) eps(x_in | x_m) - w1 eps(x_in | 0)
//! eps   = eps - w2 gamma sigma_t grad ln p(y | x_in)      (t <= t_start)
//! x_t   = (x_in - (1 - a_t) / sqrt(1 - abar_t) eps) / sqrt(a_t) + [t > 0] sigma_t z
//! ```
//!
//! After the last step the observed frames are copied back verbatim and the
//! missing frames are clamped to `[-1, 1]`.

use rand::Rng;
use serde::Serialize;

use crate::audio::MelSpectrogram;
use crate::diffusion::{forward_noise, DiffusionSchedule};
use crate::guidance::{guidance_gradient, guided_noise, required_frames, CtcClassifier, GuidanceConfig, GuidanceMode, TokenSequence};
use crate::mask::{mask_tensor, FrameMask};
use crate::models::{ConditionInput, Denoiser};
use crate::{invalid, randn, Error, Real, Result, Tensor};

/// `(1 + w1) eps_cond - w1 eps_uncond`.
pub fn cfg_combine<T: Real>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, w1: T) -> Result<Tensor<T>> {
    let a = T::one() + w1;
    Ok(eps_cond.zip_map(eps_uncond, |c, u| a * c - w1 * u)?)
}

/// Observed frames of `x_m` noised to step `t` with `eps`, missing frames
/// taken from `x_prev`.
pub fn prepare_input<T: Real>(
    x_m: &Tensor<T>,
    x_prev: &Tensor<T>,
    m: &FrameMask,
    t: usize,
    eps: &Tensor<T>,
    sch: &DiffusionSchedule<T>,
) -> Result<Tensor<T>> {
    x_m.check_same_shape(x_prev)?;
    if x_m.ndim() != 2 || x_m.cols() != m.len() {
        return invalid(format!("mask of {} frames does not fit {:?}", m.len(), x_m.shape()));
    }
    let noised = forward_noise(x_m, t, eps, sch)?;
    let cols = m.len();
    let mut out = noised.into_data();
    for (i, v) in out.iter_mut().enumerate() {
        if !m.is_observed(i % cols) {
            *v = x_prev.data()[i];
        }
    }
    Ok(Tensor::from_vec(x_m.shape(), out)?)
}

/// One ancestral update; `z` is ignored at `t = 0`.
pub fn reverse_step<T: Real>(
    x_in: &Tensor<T>,
    eps_p: &Tensor<T>,
    t: usize,
    z: &Tensor<T>,
    sch: &DiffusionSchedule<T>,
) -> Result<Tensor<T>> {
    sch.check_step(t)?;
    x_in.check_same_shape(eps_p)?;
    x_in.check_same_shape(z)?;
    let a = sch.alpha(t);
    let inv_sqrt_a = T::one() / a.sqrt();
    let k = (T::one() - a) / (T::one() - sch.alpha_bar(t)).sqrt();
    let mean = x_in.zip_map(eps_p, |x, e| inv_sqrt_a * (x - k * e))?;
    if t == 0 {
        return Ok(mean);
    }
    let s = sch.sigma(t);
    Ok(mean.zip_map(z, |m, n| m + s * n)?)
}

/// Which denoiser passes feed the noise estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CfgMode {
    /// Both passes, mixed by `w1`.
    #[default]
    Combined,
    /// The conditional pass alone.
    ConditionalOnly,
    /// The null-condition pass alone.
    UnconditionalOnly,
}

#[derive(Clone, Copy, Debug)]
pub struct SamplerOptions {
    pub cfg_mode: CfgMode,
    /// Keep per-step records in the trace.
    pub trace: bool,
    /// Clamp the missing frames of the output to `[-1, 1]`.
    pub clamp: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            cfg_mode: CfgMode::Combined,
            trace: false,
            clamp: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub eps_cfg_norm: f64,
    /// CTC loss of the target at the step input, when the classifier ran.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ctc_loss: Option<f64>,
    /// `|eps_hat - eps_cfg|_F`, when guidance shifted the estimate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guidance_norm: Option<f64>,
    #[serde(skip)]
    pub snapshot: Option<Vec<f64>>,
}

/// Diagnostics of one sampling run, ordered from `t = T - 1` down to 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SampleTrace {
    pub records: Vec<StepRecord>,
    pub classifier_calls: usize,
    /// Largest magnitude in the missing frames before clamping.
    pub pre_clamp_max_abs: f64,
}

impl SampleTrace {
    /// Steps between kept snapshots.
    pub fn snapshot_stride(steps: usize) -> usize {
        steps.div_ceil(20).max(1)
    }

    /// One JSON object per record.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace records serialize") + "\n")
            .collect()
    }
}

/// Target tokens and the classifier that scores them.
#[derive(Clone, Copy)]
pub struct Guide<'a, T: Real> {
    pub classifier: &'a dyn CtcClassifier<T>,
    pub tokens: &'a TokenSequence,
}

/// Samples the missing frames of `cond.masked_mel` under mask `m`.
///
/// Fails with a configuration error when guidance is requested without a
/// classifier and target. A target too long for the classifier output is
/// logged and sampling continues unguided.
pub fn inpaint<T: Real, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    cond: &ConditionInput<T>,
    m: &FrameMask,
    guide: Option<Guide<'_, T>>,
    gcfg: &GuidanceConfig,
    sch: &DiffusionSchedule<T>,
    opts: &SamplerOptions,
    rng: &mut R,
) -> Result<(MelSpectrogram<T>, SampleTrace)> {
    let steps = sch.steps();
    gcfg.validate(steps)?;
    let x_m = mask_tensor(&cond.masked_mel, m)?;
    let shape = x_m.shape().to_vec();
    let frames = m.len();

    let mut guide = match (gcfg.mode, guide) {
        (GuidanceMode::None, _) => None,
        (_, None) => {
            return Err(Error::Config(format!(
                "guidance mode {:?} needs a classifier and a target",
                gcfg.mode
            )))
        }
        (_, Some(g)) => Some(g),
    };
    if let Some(g) = guide {
        let avail = g.classifier.output_frames(frames);
        if required_frames(g.tokens.ids()) > avail {
            log::warn!(
                "target of {} tokens does not fit {avail} classifier frames; sampling unguided",
                g.tokens.len()
            );
            guide = None;
        }
    }
    let t_start = gcfg.start_step(steps)?;
    let w1 = T::lit(gcfg.w1);
    let w2 = T::lit(gcfg.w2);
    let null = cond.null_like();
    let stride = SampleTrace::snapshot_stride(steps);

    let mut trace = SampleTrace::default();
    let mut x = randn::<T, _>(&shape, rng);
    for t in (0..steps).rev() {
        let eps = randn::<T, _>(&shape, rng);
        let x_in = prepare_input(&x_m, &x, m, t, &eps, sch)?;
        let eps_cfg = match opts.cfg_mode {
            CfgMode::Combined => {
                let ec = denoiser.predict(&x_in, cond, t)?;
                let eu = denoiser.predict(&x_in, &null, t)?;
                cfg_combine(&ec, &eu, w1)?
            }
            CfgMode::ConditionalOnly => denoiser.predict(&x_in, cond, t)?,
            CfgMode::UnconditionalOnly => denoiser.predict(&x_in, &null, t)?,
        };
        let mut record = StepRecord {
            t,
            eps_cfg_norm: eps_cfg.norm().as_f64(),
            ctc_loss: None,
            guidance_norm: None,
            snapshot: None,
        };
        let eps_hat = match guide {
            Some(g) if t <= t_start => {
                trace.classifier_calls += 1;
                let gg = guidance_gradient(g.classifier, &x_in, g.tokens, t)?;
                record.ctc_loss = Some(-gg.log_prob.as_f64());
                if gg.skipped || !gg.log_prob.is_finite() {
                    eps_cfg
                } else {
                    let (hat, applied) = guided_noise(&eps_cfg, &gg.grad, sch.sigma(t), w2)?;
                    if applied {
                        record.guidance_norm = Some(hat.sub(&eps_cfg)?.norm().as_f64());
                    }
                    hat
                }
            }
            _ => eps_cfg,
        };
        let z = if t > 0 {
            randn::<T, _>(&shape, rng)
        } else {
            Tensor::zeros(&shape)
        };
        x = reverse_step(&x_in, &eps_hat, t, &z, sch)?;
        if !x.all_finite() {
            return Err(Error::Numerical(format!("sample diverged at step {t}")));
        }
        if opts.trace {
            if t % stride == 0 {
                record.snapshot = Some(x.to_f64_vec());
            }
            trace.records.push(record);
        }
    }

    let mut out = x_m.clone().into_data();
    let mut peak = 0.0f64;
    for (i, v) in out.iter_mut().enumerate() {
        if m.is_observed(i % frames) {
            continue;
        }
        let y = *v + x.data()[i];
        peak = peak.max(y.as_f64().abs());
        *v = if opts.clamp { y.max(-T::one()).min(T::one()) } else { y };
    }
    trace.pre_clamp_max_abs = peak;
    let values = Tensor::from_vec(&shape, out)?;
    Ok((MelSpectrogram::new(values, opts.clamp)?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    #[test]
    fn cfg_endpoints() {
        let c = Tensor::from_vec(&[2], vec![1.5f64, -2.0]).unwrap();
        let u = Tensor::from_vec(&[2], vec![0.25f64, 3.0]).unwrap();
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, -1.0).unwrap(), u);
        assert_eq!(cfg_combine(&c, &c, 2.7).unwrap(), c);
        let w = cfg_combine(&c, &u, 2.0).unwrap();
        assert_eq!(w.data(), &[3.0 * 1.5 - 2.0 * 0.25, 3.0 * -2.0 - 2.0 * 3.0]);
    }

    #[test]
    fn reverse_step_arithmetic() {
        let sch = DiffusionSchedule::<f64>::from_betas(&[0.1, 0.1], Default::default()).unwrap();
        let one = Tensor::full(&[1, 1], 1.0);
        let z = Tensor::full(&[1, 1], 5.0);
        // abar_1 = 0.81
        let x = reverse_step(&one, &one, 1, &Tensor::zeros(&[1, 1]), &sch).unwrap();
        let expect = (1.0 - 0.1 / 0.19f64.sqrt()) / 0.9f64.sqrt();
        assert!((x.data()[0] - expect).abs() < 1e-15);
        assert!((x.data()[0] - 0.81234).abs() < 1e-4);
        let x0 = reverse_step(&one, &Tensor::zeros(&[1, 1]), 0, &z, &sch).unwrap();
        assert_eq!(x0.data()[0], 1.0 / 0.9f64.sqrt());
    }

    #[test]
    fn prepare_input_blends_columns() {
        let sch = make_schedule::<f64>(10, 1e-4, 0.02).unwrap();
        let x_m = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1);
        let prev = Tensor::full(&[2, 3], 7.0);
        let eps = Tensor::full(&[2, 3], 0.5);
        let noised = forward_noise(&x_m, 4, &eps, &sch).unwrap();
        let m = FrameMask::from_flags(vec![true, false, true]);
        let x = prepare_input(&x_m, &prev, &m, 4, &eps, &sch).unwrap();
        for r in 0..2 {
            assert_eq!(x.at(r, 0), noised.at(r, 0));
            assert_eq!(x.at(r, 1), 7.0);
            assert_eq!(x.at(r, 2), noised.at(r, 2));
        }
        let all = prepare_input(&x_m, &prev, &FrameMask::all_observed(3), 4, &eps, &sch).unwrap();
        assert_eq!(all, noised);
        let none = prepare_input(&x_m, &prev, &FrameMask::all_masked(3), 4, &eps, &sch).unwrap();
        assert_eq!(none, prev);
    }

    #[test]
    fn snapshot_stride_rounds_up() {
        assert_eq!(SampleTrace::snapshot_stride(50), 3);
        assert_eq!(SampleTrace::snapshot_stride(1000), 50);
        assert_eq!(SampleTrace::snapshot_stride(5), 1);
    }
}

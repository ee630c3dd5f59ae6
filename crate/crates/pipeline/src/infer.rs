//! Batch inpainting over an utterance list.
//!
//! Utterance `i` samples from its own stream `SAMPLE_BASE + i`, so results
//! do not depend on worker count or scheduling, and every grid cell sees
//! the same draws.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use inpaint_core::audio::{griffin_lim_seeded, MelSpectrogram, MelStats, Waveform, write_wav};
use inpaint_core::checkpoint::Archive;
use inpaint_core::diffusion::DiffusionSchedule;
use inpaint_core::guidance::{Conformer, GuidanceConfig, GuidanceMode, TokenSequence, Vocab};
use inpaint_core::mask::{build_eval_mask, FrameMask};
use inpaint_core::metrics::{MetricRecord, MetricRegistry};
use inpaint_core::models::{AnyDenoiser, ConditionInput, DenoiserKind};
use inpaint_core::sampler::{inpaint, Guide, SampleTrace, SamplerOptions};

use crate::config::{MaskConfig, MaskMode, RunConfig};
use crate::evaluate::{evaluate_utterance, records_for, write_report, EvalInput, ReportFiles};
use crate::manifest::Utterance;
use crate::train::target_tokens;
use crate::{stream_rng, streams, Error, Float, Result};

/// Frozen models shared by all workers.
pub struct Models<'a> {
    pub denoiser: &'a AnyDenoiser<Float>,
    pub denoiser_kind: DenoiserKind,
    pub classifier: Option<(&'a Conformer<Float>, &'a Vocab)>,
    pub stats: &'a MelStats,
    pub schedule: &'a DiffusionSchedule<Float>,
}

pub fn eval_mask(cfg: &MaskConfig, frames: usize) -> Result<FrameMask> {
    Ok(match cfg.eval_mode {
        MaskMode::Fixed => FrameMask::from_intervals(frames, &cfg.fixed_intervals)?,
        MaskMode::Generated => build_eval_mask(frames, &cfg.eval)?,
    })
}

pub struct UtteranceResult {
    pub utterance_id: String,
    pub reference: MelSpectrogram<Float>,
    pub output: MelSpectrogram<Float>,
    pub mask: FrameMask,
    pub trace: SampleTrace,
    pub wave: Option<Waveform<Float>>,
    pub metrics: Vec<(String, Option<f64>)>,
}

impl UtteranceResult {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).and_then(|(_, v)| *v)
    }
}

/// Inpaints utterance `index` of a run and scores it.
pub fn inpaint_utterance(
    cfg: &RunConfig,
    gcfg: &GuidanceConfig,
    models: &Models<'_>,
    utt: &Utterance,
    index: usize,
    plugins: &MetricRegistry,
) -> Result<UtteranceResult> {
    let reference = utt.mel(models.stats)?;
    let mask = eval_mask(&cfg.masks, reference.frames())?;
    let wave = (models.denoiser_kind == DenoiserKind::Unet).then(|| utt.wave.samples());
    let cond = ConditionInput::observed(reference.values(), &mask, wave)?;
    let tokens: Option<TokenSequence> = match models.classifier {
        Some((_, vocab)) => target_tokens(vocab, &utt.entry.transcript, utt.entry.phonemes.as_deref()).ok(),
        None => None,
    };
    let guide = match (gcfg.mode, models.classifier, tokens.as_ref()) {
        (GuidanceMode::None, _, _) => None,
        (_, Some((clf, _)), Some(y)) => Some(Guide {
            classifier: clf as &dyn inpaint_core::guidance::CtcClassifier<Float>,
            tokens: y,
        }),
        _ => {
            return Err(Error::Config(format!(
                "guidance mode {:?} needs a classifier and a target for `{}`",
                gcfg.mode,
                utt.id()
            )))
        }
    };
    let opts = SamplerOptions {
        trace: cfg.inference.trace,
        ..SamplerOptions::default()
    };
    let mut rng = stream_rng(cfg.seed, streams::SAMPLE_BASE + index as u64);
    let (output, trace) = inpaint(models.denoiser, &cond, &mask, guide, gcfg, models.schedule, &opts, &mut rng)?;
    let gen_wave = if cfg.inference.write_wav {
        Some(griffin_lim_seeded(&output, models.stats, cfg.inference.griffin_lim_iters, cfg.seed)?)
    } else {
        None
    };
    let metrics = evaluate_utterance(
        &EvalInput {
            reference: &reference,
            generated: &output,
            mask: &mask,
            reference_wave: Some(&utt.wave),
            generated_wave: gen_wave.as_ref(),
            transcript: Some(&utt.entry.transcript),
            classifier: models.classifier.zip(tokens.as_ref()).map(|((c, _), y)| (c, y)),
        },
        models.stats,
        plugins,
    )?;
    Ok(UtteranceResult {
        utterance_id: utt.id().to_string(),
        reference,
        output,
        mask,
        trace,
        wave: gen_wave,
        metrics,
    })
}

/// Inpaints every utterance on `workers` threads; results keep input order.
pub fn run_batch(
    cfg: &RunConfig,
    gcfg: &GuidanceConfig,
    models: &Models<'_>,
    utts: &[Utterance],
    plugins: &MetricRegistry,
) -> Vec<Result<UtteranceResult>> {
    let workers = match cfg.inference.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(utts.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<UtteranceResult>>>> = utts.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= utts.len() {
                    break;
                }
                let r = inpaint_utterance(cfg, gcfg, models, &utts[i], i, plugins);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every slot filled"))
        .collect()
}

#[derive(Debug)]
pub struct RunSummary {
    pub succeeded: usize,
    pub failed: Vec<(String, String)>,
    pub report: ReportFiles,
    pub records: Vec<MetricRecord>,
}

fn save_mel(path: &Path, mel: &MelSpectrogram<Float>, mask: &FrameMask, hash: &str) -> Result<()> {
    let mut a = Archive::new();
    a.set_meta("config_hash", hash);
    a.set_meta("mask", mask.to_text());
    a.insert("mel", mel.values());
    a.save(path)?;
    Ok(())
}

/// Loads a spectrogram written by [`run_inpaint`].
pub fn load_mel(path: &Path) -> Result<(MelSpectrogram<Float>, FrameMask)> {
    let a = Archive::load(path)?;
    let mel = MelSpectrogram::new(a.get("mel")?, true)?;
    let mask = FrameMask::from_text(mel.frames(), a.meta("mask").unwrap_or_default())?;
    Ok((mel, mask))
}

pub fn output_paths(out: &Path, id: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        out.join(format!("{id}.mel.safetensors")),
        out.join(format!("{id}.trace.jsonl")),
        out.join(format!("{id}.wav")),
    )
}

/// Runs the batch, writes per-utterance artifacts and the report. A
/// failing utterance is logged and recorded; the rest still run.
pub fn run_inpaint(cfg: &RunConfig, models: &Models<'_>, utts: &[Utterance], out: &Path, plugins: &MetricRegistry) -> Result<RunSummary> {
    std::fs::create_dir_all(out)?;
    let hash = cfg.hash();
    let mut records = Vec::new();
    let mut failed = Vec::new();
    let mut succeeded = 0;
    for (utt, r) in utts.iter().zip(run_batch(cfg, &cfg.guidance, models, utts, plugins)) {
        match r {
            Ok(res) => {
                let (mel_p, trace_p, wav_p) = output_paths(out, &res.utterance_id);
                save_mel(&mel_p, &res.output, &res.mask, &hash)?;
                if cfg.inference.trace {
                    std::fs::write(&trace_p, res.trace.to_jsonl())?;
                }
                if let Some(w) = &res.wave {
                    write_wav(&wav_p, w)?;
                }
                records.extend(records_for(&res.utterance_id, res.metrics, &hash));
                succeeded += 1;
            }
            Err(e) => {
                log::error!("{}: {e}", utt.id());
                failed.push((utt.id().to_string(), e.to_string()));
            }
        }
    }
    let report = write_report(out, &records, &hash)?;
    Ok(RunSummary {
        succeeded,
        failed,
        report,
        records,
    })
}

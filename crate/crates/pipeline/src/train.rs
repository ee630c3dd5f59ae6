//! Training drivers with checkpointing and bit-exact resume.
//!
//! A checkpoint holds the weights, the optimizer moments and the position
//! of the training random stream, so a resumed run draws exactly what the
//! uninterrupted run would have. The last `keep_last` periodic checkpoints
//! are kept, plus `best.safetensors` for the lowest loss seen over a
//! checkpoint window.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use inpaint_autograd::optim::{Adam, AdamConfig};
use inpaint_core::audio::{MelSpectrogram, MelStats};
use inpaint_core::checkpoint::Archive;
use inpaint_core::diffusion::{batch_gradients, DiffusionSchedule, TrainExample};
use inpaint_core::guidance::{
    classifier_batch_gradients, ClassifierExample, Conformer, CtcClassifier, TokenSequence, Vocab, VocabKind,
};
use inpaint_core::mask::{sample_training_mask, FrameMask, TrainMaskSpec};
use inpaint_core::models::{AnyDenoiser, DenoiserConfig, DenoiserKind, Denoiser};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ClassifierSettings, MaskConfig, MaskMode, RunConfig};
use crate::manifest::Corpus;
use crate::{stream_rng, streams, Error, Float, Result};

/// How training examples get their masks.
#[derive(Clone, Debug)]
pub enum MaskPolicy {
    Fixed(Vec<(f64, f64)>),
    Random(TrainMaskSpec),
}

impl MaskPolicy {
    pub fn for_training(cfg: &MaskConfig) -> Self {
        match cfg.train_mode {
            MaskMode::Fixed => Self::Fixed(cfg.fixed_intervals.clone()),
            MaskMode::Generated => Self::Random(cfg.train),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, frames: usize, rng: &mut R) -> Result<FrameMask> {
        Ok(match self {
            Self::Fixed(iv) => FrameMask::from_intervals(frames, iv)?,
            Self::Random(spec) => sample_training_mask(frames, spec, rng)?,
        })
    }
}

/// A normalized spectrogram and, for audio-conditioned models, its samples.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub mel: MelSpectrogram<Float>,
    pub wave: Option<Vec<Float>>,
}

pub fn train_items(corpus: &Corpus, kind: DenoiserKind) -> Result<Vec<TrainItem>> {
    corpus
        .utterances
        .iter()
        .map(|u| {
            Ok(TrainItem {
                mel: u.mel(&corpus.stats)?,
                wave: (kind == DenoiserKind::Unet).then(|| u.wave.samples().to_vec()),
            })
        })
        .collect()
}

fn adam_config(lr: f64, clip: Option<f64>) -> AdamConfig {
    AdamConfig {
        lr,
        clip_norm: clip,
        ..AdamConfig::default()
    }
}

fn save_rng(a: &mut Archive, prefix: &str, rng: &ChaCha8Rng) {
    a.set_meta(format!("{prefix}seed"), hex::encode(rng.get_seed()));
    a.set_meta(format!("{prefix}stream"), rng.get_stream());
    a.set_meta(format!("{prefix}word_pos"), rng.get_word_pos());
}

fn load_rng(a: &Archive, prefix: &str) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    let raw = hex::decode(a.meta(&format!("{prefix}seed")).unwrap_or_default())
        .map_err(|e| Error::Data(format!("bad rng seed in checkpoint: {e}")))?;
    let seed: [u8; 32] = raw
        .try_into()
        .map_err(|_| Error::Data("rng seed in checkpoint must be 32 bytes".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(a.meta_parse(&format!("{prefix}stream"))?);
    rng.set_word_pos(a.meta_parse(&format!("{prefix}word_pos"))?);
    Ok(rng)
}

fn save_stats(a: &mut Archive, stats: &MelStats) {
    a.set_meta("stats", stats.to_text());
}

fn load_stats(a: &Archive) -> Result<MelStats> {
    let text = a.meta("stats").ok_or_else(|| Error::Data("checkpoint lacks mel stats".into()))?;
    Ok(MelStats::from_text(text)?)
}

/// Denoiser, optimizer and training stream.
pub struct DdpmState {
    pub model: AnyDenoiser<Float>,
    pub model_config: DenoiserConfig,
    pub opt: Adam<Float>,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl DdpmState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let mut init = stream_rng(cfg.seed, streams::DENOISER_INIT);
        let model = cfg.model.build::<Float>(&mut init)?;
        let opt = Adam::new(adam_config(cfg.train.learning_rate, cfg.train.clip_norm), model.params());
        Ok(Self {
            model,
            model_config: cfg.model.clone(),
            opt,
            rng: stream_rng(cfg.seed, streams::DENOISER_TRAIN),
            step: 0,
        })
    }

    /// Draws a batch and its masks, and applies one optimizer update.
    /// A non-finite loss or gradient leaves the state untouched.
    pub fn train_step(
        &mut self,
        data: &[TrainItem],
        sch: &DiffusionSchedule<Float>,
        cfg: &RunConfig,
        masks: &MaskPolicy,
    ) -> Result<f64> {
        let objective = cfg.train.objective();
        let mut batch = Vec::with_capacity(objective.batch_size);
        for _ in 0..objective.batch_size {
            let item = &data[self.rng.random_range(0..data.len())];
            batch.push(TrainExample {
                mask: masks.draw(item.mel.frames(), &mut self.rng)?,
                x0: item.mel.clone(),
                wave: item.wave.clone(),
            });
        }
        let (loss, grads) = batch_gradients(&self.model, &batch, sch, &objective, &mut self.rng)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Runtime(format!("non-finite loss at step {}", self.step + 1)));
        }
        self.opt.step(self.model.params_mut(), &grads).map_err(inpaint_core::Error::from)?;
        self.step += 1;
        Ok(loss as f64)
    }

    pub fn to_archive(&self, config_hash: &str, stats: &MelStats) -> Result<Archive> {
        let mut a = Archive::new();
        a.set_meta("kind", "denoiser");
        a.set_meta("config_hash", config_hash);
        a.set_meta("model_config", serde_json::to_string(&self.model_config)?);
        a.set_meta("train_step", self.step);
        save_stats(&mut a, stats);
        save_rng(&mut a, "rng.", &self.rng);
        a.insert_params("model.", self.model.params());
        a.insert_adam("adam.", &self.opt, self.model.params());
        Ok(a)
    }

    pub fn from_archive(cfg: &RunConfig, a: &Archive) -> Result<Self> {
        let (model, model_config, _) = denoiser_from_archive(a)?;
        if model_config != cfg.model {
            return Err(Error::Config("checkpoint model shape differs from the configuration".into()));
        }
        let opt = a.load_adam("adam.", adam_config(cfg.train.learning_rate, cfg.train.clip_norm), model.params())?;
        Ok(Self {
            model,
            model_config,
            opt,
            rng: load_rng(a, "rng.")?,
            step: a.meta_parse("train_step")?,
        })
    }
}

/// Rebuilds a denoiser from any archive written by this module.
pub fn denoiser_from_archive(a: &Archive) -> Result<(AnyDenoiser<Float>, DenoiserConfig, MelStats)> {
    if a.meta("kind") != Some("denoiser") {
        return Err(Error::Data("archive does not hold a denoiser".into()));
    }
    let model_config: DenoiserConfig = serde_json::from_str(a.meta("model_config").unwrap_or_default())?;
    let mut scratch = stream_rng(0, 0);
    let mut model = model_config.build::<Float>(&mut scratch)?;
    a.load_params("model.", model.params_mut())?;
    Ok((model, model_config, load_stats(a)?))
}

/// Classifier, optimizer and training stream.
pub struct CtcState {
    pub classifier: Conformer<Float>,
    pub settings: ClassifierSettings,
    pub vocab: Vocab,
    pub opt: Adam<Float>,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
}

impl CtcState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let mut init = stream_rng(cfg.seed, streams::CLASSIFIER_INIT);
        let classifier = Conformer::new(cfg.classifier.conformer()?, &mut init)?;
        let opt = Adam::new(adam_config(cfg.ctc_train.learning_rate, cfg.ctc_train.clip_norm), classifier.params());
        Ok(Self {
            classifier,
            settings: cfg.classifier.clone(),
            vocab: cfg.classifier.vocab()?,
            opt,
            rng: stream_rng(cfg.seed, streams::CLASSIFIER_TRAIN),
            epoch: 0,
        })
    }

    /// One pass over `data` in shuffled batches; returns the mean loss.
    pub fn train_epoch(&mut self, data: &[ClassifierExample<Float>], sch: &DiffusionSchedule<Float>, cfg: &RunConfig) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.ctc_train.batch_size) {
            let batch: Vec<&ClassifierExample<Float>> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads, skipped) =
                classifier_batch_gradients(&self.classifier, &batch, sch, cfg.ctc_train.steps, &mut self.rng)?;
            if skipped == batch.len() {
                continue;
            }
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Runtime(format!("non-finite classifier loss in epoch {}", self.epoch + 1)));
            }
            self.opt.step(self.classifier.params_mut(), &grads).map_err(inpaint_core::Error::from)?;
            sum += loss as f64;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Data("no transcript fits its spectrogram".into()));
        }
        self.epoch += 1;
        Ok(sum / batches as f64)
    }

    pub fn to_archive(&self, config_hash: &str, stats: &MelStats) -> Result<Archive> {
        let mut a = Archive::new();
        a.set_meta("kind", "classifier");
        a.set_meta("config_hash", config_hash);
        a.set_meta("classifier_config", serde_json::to_string(&self.settings)?);
        a.set_meta("vocab", self.vocab.to_text());
        a.set_meta("epoch", self.epoch);
        save_stats(&mut a, stats);
        save_rng(&mut a, "rng.", &self.rng);
        a.insert_params("model.", self.classifier.params());
        a.insert_adam("adam.", &self.opt, self.classifier.params());
        Ok(a)
    }

    pub fn from_archive(cfg: &RunConfig, a: &Archive) -> Result<Self> {
        let (classifier, vocab, _) = classifier_from_archive(a)?;
        let opt = a.load_adam(
            "adam.",
            adam_config(cfg.ctc_train.learning_rate, cfg.ctc_train.clip_norm),
            classifier.params(),
        )?;
        Ok(Self {
            classifier,
            settings: cfg.classifier.clone(),
            vocab,
            opt,
            rng: load_rng(a, "rng.")?,
            epoch: a.meta_parse("epoch")?,
        })
    }
}

pub fn classifier_from_archive(a: &Archive) -> Result<(Conformer<Float>, Vocab, MelStats)> {
    if a.meta("kind") != Some("classifier") {
        return Err(Error::Data("archive does not hold a classifier".into()));
    }
    let settings: ClassifierSettings = serde_json::from_str(a.meta("classifier_config").unwrap_or_default())?;
    let vocab = Vocab::from_text(a.meta("vocab").unwrap_or_default())?;
    let mut scratch = stream_rng(0, 0);
    let mut clf = Conformer::new(settings.conformer()?, &mut scratch)?;
    a.load_params("model.", clf.params_mut())?;
    Ok((clf, vocab, load_stats(a)?))
}

/// Target tokens of an utterance under `vocab`: the phoneme string for a
/// phoneme vocabulary, the transcript otherwise.
pub fn target_tokens(vocab: &Vocab, transcript: &str, phonemes: Option<&str>) -> Result<TokenSequence> {
    let text = match vocab.kind() {
        VocabKind::Phoneme => phonemes.ok_or_else(|| Error::Data("phoneme guidance needs phoneme strings".into()))?,
        VocabKind::Character => transcript,
    };
    Ok(vocab.encode(text)?)
}

pub fn classifier_examples(corpus: &Corpus, vocab: &Vocab) -> Result<Vec<ClassifierExample<Float>>> {
    corpus
        .utterances
        .iter()
        .map(|u| {
            Ok(ClassifierExample {
                x0: u.mel(&corpus.stats)?.into_values(),
                tokens: target_tokens(vocab, &u.entry.transcript, u.entry.phonemes.as_deref())?,
            })
        })
        .collect()
}

/// Periodic checkpoint files in one folder.
pub struct CheckpointDir {
    dir: PathBuf,
    keep: usize,
}

impl CheckpointDir {
    pub fn new(dir: PathBuf, keep: usize) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, keep })
    }

    fn periodic(&self) -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("ckpt-") && n.ends_with(".safetensors"))
            })
            .collect();
        v.sort();
        Ok(v)
    }

    /// Writes `ckpt-<step>` and deletes periodic checkpoints beyond the
    /// newest `keep`.
    pub fn save(&self, step: u64, a: &Archive) -> Result<PathBuf> {
        let path = self.dir.join(format!("ckpt-{step:010}.safetensors"));
        a.save(&path)?;
        let all = self.periodic()?;
        for old in &all[..all.len().saturating_sub(self.keep)] {
            fs::remove_file(old)?;
        }
        Ok(path)
    }

    pub fn save_best(&self, a: &Archive) -> Result<PathBuf> {
        let path = self.dir.join("best.safetensors");
        a.save(&path)?;
        Ok(path)
    }

    pub fn latest(&self) -> Result<Option<PathBuf>> {
        Ok(self.periodic()?.pop())
    }

    /// Periodic checkpoints as `(step, path)`, oldest first.
    pub fn list(&self) -> Result<Vec<(u64, PathBuf)>> {
        Ok(self
            .periodic()?
            .into_iter()
            .filter_map(|p| {
                let step = p.file_stem()?.to_str()?.strip_prefix("ckpt-")?.split('.').next()?.parse().ok()?;
                Some((step, p))
            })
            .collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossLine {
    pub step: u64,
    pub loss: f64,
}

fn rewrite_log(path: &Path, upto: u64) -> Result<fs::File> {
    let kept: String = match fs::read_to_string(path) {
        Ok(text) => text
            .lines()
            .filter(|l| serde_json::from_str::<LossLine>(l).is_ok_and(|r| r.step <= upto))
            .map(|l| format!("{l}\n"))
            .collect(),
        Err(_) => String::new(),
    };
    fs::write(path, kept)?;
    Ok(fs::OpenOptions::new().append(true).open(path)?)
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub final_step: u64,
    /// Losses of the steps run by this call.
    pub losses: Vec<f64>,
    pub model_path: PathBuf,
}

/// Trains the denoiser to `cfg.train.steps`, resuming from the newest
/// checkpoint in `out/checkpoints/denoiser` when `resume` is set.
///
/// A non-finite loss stops training after saving the state from before
/// the failing step.
pub fn train_ddpm(cfg: &RunConfig, corpus: &Corpus, out: &Path, resume: bool) -> Result<TrainReport> {
    let hash = cfg.hash();
    let sch = cfg.schedule.build::<Float>()?;
    let items = train_items(corpus, cfg.model.kind)?;
    let masks = MaskPolicy::for_training(&cfg.masks);
    let ckpts = CheckpointDir::new(out.join("checkpoints").join("denoiser"), cfg.train.keep_last)?;
    let mut state = match (resume, ckpts.latest()?) {
        (true, Some(p)) => {
            log::info!("resuming from {}", p.display());
            DdpmState::from_archive(cfg, &Archive::load(&p)?)?
        }
        _ => DdpmState::init(cfg)?,
    };
    let mut log_file = rewrite_log(&out.join("denoiser_loss.jsonl"), state.step)?;
    let mut best = f64::INFINITY;
    let mut window = Vec::new();
    let mut losses = Vec::new();
    while state.step < cfg.train.steps {
        let loss = match state.train_step(&items, &sch, cfg, &masks) {
            Ok(l) => l,
            Err(e) => {
                let p = ckpts.save(state.step, &state.to_archive(&hash, &corpus.stats)?)?;
                log::error!("training stopped; last good state saved to {}", p.display());
                return Err(e);
            }
        };
        writeln!(log_file, "{}", serde_json::to_string(&LossLine { step: state.step, loss })?)?;
        losses.push(loss);
        window.push(loss);
        if state.step % cfg.train.checkpoint_every == 0 || state.step == cfg.train.steps {
            let a = state.to_archive(&hash, &corpus.stats)?;
            ckpts.save(state.step, &a)?;
            let smoothed = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            if smoothed < best {
                best = smoothed;
                ckpts.save_best(&a)?;
            }
            log::info!("denoiser step {} loss {smoothed:.4}", state.step);
        }
    }
    let model_path = out.join("denoiser.safetensors");
    state.to_archive(&hash, &corpus.stats)?.save(&model_path)?;
    Ok(TrainReport {
        final_step: state.step,
        losses,
        model_path,
    })
}

/// Trains the classifier for `cfg.ctc_train.epochs` epochs on noised
/// spectrograms, with the same checkpoint and resume rules as
/// [`train_ddpm`].
pub fn train_ctc(cfg: &RunConfig, corpus: &Corpus, out: &Path, resume: bool) -> Result<TrainReport> {
    let hash = cfg.hash();
    let sch = cfg.schedule.build::<Float>()?;
    let ckpts = CheckpointDir::new(out.join("checkpoints").join("classifier"), cfg.ctc_train.keep_last)?;
    let mut state = match (resume, ckpts.latest()?) {
        (true, Some(p)) => CtcState::from_archive(cfg, &Archive::load(&p)?)?,
        _ => CtcState::init(cfg)?,
    };
    let data = classifier_examples(corpus, &state.vocab)?;
    let mut log_file = rewrite_log(&out.join("classifier_loss.jsonl"), state.epoch)?;
    let mut best = f64::INFINITY;
    let mut losses = Vec::new();
    while (state.epoch as usize) < cfg.ctc_train.epochs {
        let loss = match state.train_epoch(&data, &sch, cfg) {
            Ok(l) => l,
            Err(e) => {
                ckpts.save(state.epoch, &state.to_archive(&hash, &corpus.stats)?)?;
                return Err(e);
            }
        };
        writeln!(log_file, "{}", serde_json::to_string(&LossLine { step: state.epoch, loss })?)?;
        losses.push(loss);
        let a = state.to_archive(&hash, &corpus.stats)?;
        ckpts.save(state.epoch, &a)?;
        if loss < best {
            best = loss;
            ckpts.save_best(&a)?;
        }
        log::info!("classifier epoch {} loss {loss:.4}", state.epoch);
    }
    let model_path = out.join("classifier.safetensors");
    state.to_archive(&hash, &corpus.stats)?.save(&model_path)?;
    Ok(TrainReport {
        final_step: state.epoch,
        losses,
        model_path,
    })
}

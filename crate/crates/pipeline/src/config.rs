//! Run configuration: one TOML file covering every stage.
//!
//! Unknown keys are rejected at every level. `key.path=value` overrides are
//! applied to the parsed document before validation, so they obey the same
//! schema as the file.

use std::path::{Path, PathBuf};

use inpaint_core::diffusion::{ScheduleConfig, TrainConfig};
use inpaint_core::guidance::{ConformerConfig, GuidanceConfig, GuidanceMode, StepSampling, Vocab, VocabKind};
use inpaint_core::mask::{EvalMaskSpec, TrainMaskSpec};
use inpaint_core::models::DenoiserConfig;
use serde::{Deserialize, Serialize};

use crate::toy::{toy_symbols, TOY_MASK_S};
use crate::{sha256_hex, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training manifest, one JSON object per line.
    pub manifest: PathBuf,
    /// Evaluation manifest; the training manifest when unset.
    #[serde(default)]
    pub eval_manifest: Option<PathBuf>,
    #[serde(default)]
    pub min_duration_s: f64,
    #[serde(default)]
    pub eval_min_duration_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSettings {
    pub vocab: VocabKind,
    /// Phoneme inventory, required for the phoneme vocabulary.
    #[serde(default)]
    pub phonemes: Vec<String>,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_mult: usize,
    pub conv_kernel: usize,
}

impl ClassifierSettings {
    pub fn vocab(&self) -> Result<Vocab> {
        match self.vocab {
            VocabKind::Character => Ok(Vocab::characters()),
            VocabKind::Phoneme => {
                if self.phonemes.is_empty() {
                    return Err(Error::Config("phoneme vocabulary needs `classifier.phonemes`".into()));
                }
                Ok(Vocab::phonemes(&self.phonemes)?)
            }
        }
    }

    pub fn conformer(&self) -> Result<ConformerConfig> {
        let v = self.vocab()?.len();
        let base = match self.vocab {
            VocabKind::Character => ConformerConfig::character(v),
            VocabKind::Phoneme => ConformerConfig::phoneme(v),
        };
        let cfg = ConformerConfig {
            dim: self.dim,
            heads: self.heads,
            blocks: self.blocks,
            ff_mult: self.ff_mult,
            conv_kernel: self.conv_kernel,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Random gaps from the training spec, or the evaluation grid.
    Generated,
    /// The configured fixed intervals.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub train_mode: MaskMode,
    pub eval_mode: MaskMode,
    /// Intervals in seconds used by the fixed modes.
    #[serde(default)]
    pub fixed_intervals: Vec<(f64, f64)>,
    pub train: TrainMaskSpec,
    pub eval: EvalMaskSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdpmTrainSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cond_keep_prob: f64,
    #[serde(default)]
    pub masked_loss_weight: Option<f64>,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    pub checkpoint_every: u64,
    #[serde(default = "default_keep")]
    pub keep_last: usize,
}

fn default_keep() -> usize {
    3
}

impl DdpmTrainSettings {
    pub fn objective(&self) -> TrainConfig {
        TrainConfig {
            cond_keep_prob: self.cond_keep_prob,
            masked_loss_weight: self.masked_loss_weight,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtcTrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub steps: StepSampling,
    #[serde(default = "default_keep")]
    pub keep_last: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    /// Parallel sampling workers; 0 uses the available cores.
    #[serde(default)]
    pub workers: usize,
    pub griffin_lim_iters: usize,
    #[serde(default = "yes")]
    pub write_wav: bool,
    #[serde(default = "yes")]
    pub trace: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    /// Report metric ranked first, lower is better.
    pub primary: String,
    /// Tie-break metric, lower is better.
    pub secondary: String,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            w1: vec![-1.0, 0.5, 0.8, 1.0, 2.0],
            w2: vec![0.5, 0.7, 0.8, 0.9, 1.0, 1.2, 1.5, 2.0, 3.0],
            primary: "masked_mse".into(),
            secondary: "mcd".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Relative paths resolve against the output root.
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub model: DenoiserConfig,
    pub classifier: ClassifierSettings,
    pub guidance: GuidanceConfig,
    pub masks: MaskConfig,
    pub train: DdpmTrainSettings,
    pub ctc_train: CtcTrainSettings,
    pub inference: InferenceConfig,
    #[serde(default)]
    pub grid: GridConfig,
}

impl RunConfig {
    /// Desk-scale preset for the synthetic corpus: 50 steps, a small
    /// transformer and a phoneme classifier.
    pub fn desk(manifest: PathBuf) -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("desk"),
            data: DataConfig {
                manifest,
                eval_manifest: None,
                min_duration_s: 0.0,
                eval_min_duration_s: 0.0,
            },
            schedule: ScheduleConfig::rescaled(50),
            model: DenoiserConfig::dit(128, 4, 2),
            classifier: ClassifierSettings {
                vocab: VocabKind::Phoneme,
                phonemes: toy_symbols().iter().map(|s| s.to_string()).collect(),
                dim: 32,
                heads: 2,
                blocks: 1,
                ff_mult: 2,
                conv_kernel: 7,
            },
            guidance: GuidanceConfig::guided(0.0, 1.0, GuidanceMode::Phoneme),
            masks: MaskConfig {
                train_mode: MaskMode::Fixed,
                eval_mode: MaskMode::Fixed,
                fixed_intervals: vec![TOY_MASK_S],
                train: TrainMaskSpec::default(),
                eval: EvalMaskSpec::dense(0.25),
            },
            train: DdpmTrainSettings {
                steps: 1500,
                batch_size: 8,
                learning_rate: 1e-3,
                cond_keep_prob: 0.8,
                masked_loss_weight: None,
                clip_norm: Some(1.0),
                checkpoint_every: 100,
                keep_last: 3,
            },
            ctc_train: CtcTrainSettings {
                epochs: 150,
                batch_size: 8,
                learning_rate: 2e-3,
                clip_norm: Some(5.0),
                steps: StepSampling::Uniform,
                keep_last: 3,
            },
            inference: InferenceConfig {
                workers: 0,
                griffin_lim_iters: 32,
                write_wav: true,
                trace: true,
            },
            grid: GridConfig::default(),
        }
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its folder.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.manifest = resolve(base, &cfg.data.manifest);
        cfg.data.eval_manifest = cfg.data.eval_manifest.map(|p| resolve(base, &p));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build::<f64>()?;
        self.model.validate()?;
        self.classifier.conformer()?;
        self.guidance.validate(self.schedule.steps)?;
        self.masks.train.validate()?;
        self.masks.eval.validate()?;
        self.train.objective().validate()?;
        let fixed = self.masks.train_mode == MaskMode::Fixed || self.masks.eval_mode == MaskMode::Fixed;
        if fixed && self.masks.fixed_intervals.is_empty() {
            return Err(Error::Config("fixed mask mode needs `masks.fixed_intervals`".into()));
        }
        if self.masks.fixed_intervals.iter().any(|&(s, e)| !(s >= 0.0 && e > s)) {
            return Err(Error::Config("mask intervals need 0 <= start < end".into()));
        }
        if self.train.checkpoint_every == 0 || self.train.keep_last == 0 || self.ctc_train.keep_last == 0 {
            return Err(Error::Config("checkpoint cadence and retention must be positive".into()));
        }
        if self.ctc_train.batch_size == 0 || !(self.ctc_train.learning_rate > 0.0) {
            return Err(Error::Config("classifier batch size and learning rate must be positive".into()));
        }
        if self.grid.w1.iter().chain(&self.grid.w2).any(|w| !w.is_finite()) {
            return Err(Error::Config("grid weights must be finite".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// `output_dir` under `root` unless it is absolute.
    pub fn output_path(&self, root: &Path) -> PathBuf {
        resolve(root, &self.output_dir)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Applies `a.b.c=value`. The value is read as TOML, falling back to a
/// bare string.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in path {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

//! Line-delimited manifests and corpus ingestion.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use inpaint_core::audio::{log_mel, normalize_log, read_wav, MelSpectrogram, MelStats, Waveform};
use inpaint_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Float, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub utterance_id: String,
    /// Relative paths resolve against the manifest's folder.
    pub audio_path: PathBuf,
    pub transcript: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phonemes: Option<String>,
    pub duration_s: f64,
}

/// Parses a manifest and checks ids, durations and that every audio file
/// exists.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut e: ManifestEntry = serde_json::from_str(line)
            .map_err(|err| Error::Data(format!("{}:{}: {err}", path.display(), i + 1)))?;
        if !seen.insert(e.utterance_id.clone()) {
            return Err(Error::Data(format!("duplicate utterance_id `{}`", e.utterance_id)));
        }
        if !(e.duration_s > 0.0) {
            return Err(Error::Data(format!("`{}` has non-positive duration", e.utterance_id)));
        }
        if e.audio_path.is_relative() {
            e.audio_path = base.join(&e.audio_path);
        }
        if !e.audio_path.is_file() {
            return Err(Error::Data(format!("missing audio file {}", e.audio_path.display())));
        }
        out.push(e);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("manifest {} is empty", path.display())));
    }
    Ok(out)
}

/// A loaded utterance with its unnormalized log-mel.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub entry: ManifestEntry,
    pub wave: Waveform<Float>,
    pub log_mel: Tensor<Float>,
}

impl Utterance {
    pub fn load(entry: ManifestEntry) -> Result<Self> {
        let wave = read_wav::<Float>(&entry.audio_path)
            .map_err(|e| Error::Data(format!("{}: {e}", entry.audio_path.display())))?;
        if wave.is_empty() {
            return Err(Error::Data(format!("{} has no samples", entry.audio_path.display())));
        }
        let log_mel = log_mel(&wave)?;
        Ok(Self { entry, wave, log_mel })
    }

    pub fn mel(&self, stats: &MelStats) -> Result<MelSpectrogram<Float>> {
        Ok(MelSpectrogram::new(normalize_log(&self.log_mel, stats), true)?)
    }

    pub fn id(&self) -> &str {
        &self.entry.utterance_id
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub stats: MelStats,
}

/// Loads every entry, fits normalization stats over all of them, then keeps
/// entries at least `min_duration_s` long.
pub fn ingest(manifest: &Path, min_duration_s: f64) -> Result<Corpus> {
    let all = read_manifest(manifest)?
        .into_iter()
        .map(Utterance::load)
        .collect::<Result<Vec<_>>>()?;
    let stats = MelStats::fit(all.iter().map(|u| &u.log_mel))?;
    let utterances: Vec<Utterance> = all
        .into_iter()
        .filter(|u| u.entry.duration_s >= min_duration_s)
        .collect();
    if utterances.is_empty() {
        return Err(Error::Data(format!("no entry reaches {min_duration_s} s")));
    }
    Ok(Corpus { utterances, stats })
}

/// Loads entries for evaluation under previously fitted stats.
pub fn load_split(manifest: &Path, min_duration_s: f64) -> Result<Vec<Utterance>> {
    let out: Vec<Utterance> = read_manifest(manifest)?
        .into_iter()
        .filter(|e| e.duration_s >= min_duration_s)
        .map(Utterance::load)
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Data(format!("no entry reaches {min_duration_s} s")));
    }
    Ok(out)
}

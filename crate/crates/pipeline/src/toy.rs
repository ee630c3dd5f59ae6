//! Synthetic desk-scale corpus.
//!
//! Four "phonemes" are steady two-tone complexes. Every utterance is three
//! of them separated by short silences, and evaluation masks hide the middle
//! one together with the silences around it. Pairs of utterances share their
//! outer phonemes and differ only in the middle, so the observed context
//! cannot tell the denoiser which middle phoneme belongs there; only the
//! transcript can.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use inpaint_core::audio::{Waveform, SAMPLE_RATE};
use inpaint_core::audio::write_wav;
use inpaint_core::mask::FrameMask;

use crate::manifest::ManifestEntry;
use crate::Result;

/// Symbol and the two tone frequencies in Hz.
pub const TOY_PHONEMES: [(&str, [f64; 2]); 4] = [
    ("A", [250.0, 2500.0]),
    ("B", [700.0, 1200.0]),
    ("C", [400.0, 1800.0]),
    ("D", [1000.0, 3500.0]),
];

const EDGE_S: f64 = 0.05;
const SEGMENT_S: f64 = 0.10;
const GAP_S: f64 = 0.05;
const RAMP_S: f64 = 0.01;

/// Utterance length in seconds.
pub const TOY_DURATION_S: f64 = 2.0 * EDGE_S + 3.0 * SEGMENT_S + 2.0 * GAP_S;

/// Masked interval covering the middle phoneme and most of its silences.
/// Observed frames never see the middle phoneme through the STFT window.
pub const TOY_MASK_S: (f64, f64) = (0.17, 0.33);

#[derive(Clone, Debug)]
pub struct ToyUtterance {
    pub id: String,
    pub phonemes: Vec<&'static str>,
    pub wave: Waveform<f32>,
}

impl ToyUtterance {
    pub fn phoneme_string(&self) -> String {
        self.phonemes.join(" ")
    }

    pub fn transcript(&self) -> String {
        self.phonemes.iter().map(|p| p.to_lowercase()).collect::<Vec<_>>().join(" ")
    }
}

pub fn toy_symbols() -> Vec<&'static str> {
    TOY_PHONEMES.iter().map(|(s, _)| *s).collect()
}

fn tones(symbol: &str) -> [f64; 2] {
    TOY_PHONEMES
        .iter()
        .find(|(s, _)| *s == symbol)
        .map(|(_, f)| *f)
        .unwrap_or_else(|| panic!("unknown toy phoneme {symbol}"))
}

/// Renders a phoneme sequence with the toy timing.
pub fn render(phonemes: &[&str]) -> Waveform<f32> {
    let rate = SAMPLE_RATE as f64;
    let total = phonemes.len() as f64 * (SEGMENT_S + GAP_S) - GAP_S + 2.0 * EDGE_S;
    let n = (total * rate).round() as usize;
    let mut out = vec![0.0f64; n];
    let seg = (SEGMENT_S * rate).round() as usize;
    let ramp = (RAMP_S * rate).round() as usize;
    for (k, p) in phonemes.iter().enumerate() {
        let start = ((EDGE_S + k as f64 * (SEGMENT_S + GAP_S)) * rate).round() as usize;
        let [f1, f2] = tones(p);
        for i in 0..seg {
            let env = if i < ramp {
                0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
            } else if i + ramp >= seg {
                0.5 - 0.5 * (PI * (seg - 1 - i) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let tt = (start + i) as f64 / rate;
            out[start + i] = env * (0.3 * (2.0 * PI * f1 * tt).sin() + 0.2 * (2.0 * PI * f2 * tt).sin());
        }
    }
    Waveform::new(out.into_iter().map(|v| v as f32).collect(), SAMPLE_RATE).expect("finite toy samples")
}

/// Eight utterances: every outer pair from {A, B} with middle C or D.
pub fn toy_corpus() -> Vec<ToyUtterance> {
    let mut out = Vec::new();
    for (a, b) in [("A", "B"), ("B", "A"), ("A", "A"), ("B", "B")] {
        for mid in ["C", "D"] {
            let phonemes = vec![a, mid, b];
            out.push(ToyUtterance {
                id: format!("toy-{}{}{}", a, mid, b).to_lowercase(),
                wave: render(&phonemes),
                phonemes,
            });
        }
    }
    out
}

/// The evaluation mask for a toy utterance of `frames` frames.
pub fn toy_mask(frames: usize) -> Result<FrameMask> {
    Ok(FrameMask::from_intervals(frames, &[TOY_MASK_S])?)
}

/// Writes the corpus as WAV files plus a manifest and returns the
/// manifest path.
pub fn write_toy_corpus(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut lines = String::new();
    for u in toy_corpus() {
        let path = dir.join(format!("{}.wav", u.id));
        write_wav(&path, &u.wave)?;
        let entry = ManifestEntry {
            utterance_id: u.id.clone(),
            audio_path: PathBuf::from(format!("{}.wav", u.id)),
            transcript: u.transcript(),
            phonemes: Some(u.phoneme_string()),
            duration_s: u.wave.duration_seconds(),
        };
        lines.push_str(&serde_json::to_string(&entry)?);
        lines.push('\n');
    }
    let manifest = dir.join("manifest.jsonl");
    std::fs::write(&manifest, lines)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_length() {
        let c = toy_corpus();
        assert_eq!(c.len(), 8);
        for u in &c {
            assert_eq!(u.wave.len(), (TOY_DURATION_S * 16000.0).round() as usize);
            assert_eq!(u.wave.frame_count(), 50);
        }
        let m = toy_mask(50).unwrap();
        assert_eq!(m.masked_ranges(), vec![17..33]);
    }
}

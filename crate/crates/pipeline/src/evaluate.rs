//! Per-utterance metrics and report files.

use std::path::Path;

use inpaint_core::audio::{MelSpectrogram, MelStats, Waveform};
use inpaint_core::guidance::{classifier_logprob, required_frames, Conformer, CtcClassifier, TokenSequence};
use inpaint_core::mask::FrameMask;
use inpaint_core::metrics::{logf0_mse, mcd, summarize, MetricRecord, MetricRegistry, MetricSummary};
use serde::Serialize;

use crate::{sha256_hex, Float, Result};

/// Mean squared error over the masked entries; `None` without any.
pub fn masked_mse(reference: &MelSpectrogram<Float>, generated: &MelSpectrogram<Float>, mask: &FrameMask) -> Option<f64> {
    let frames = mask.len();
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (a, b)) in reference.values().data().iter().zip(generated.values().data()).enumerate() {
        if !mask.is_observed(i % frames) {
            sum += ((a - b) as f64).powi(2);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// CTC loss of `tokens` on a clean spectrogram, scored at step 0.
pub fn final_ctc_loss(clf: &Conformer<Float>, mel: &MelSpectrogram<Float>, tokens: &TokenSequence) -> Result<Option<f64>> {
    if required_frames(tokens.ids()) > clf.output_frames(mel.frames()) {
        return Ok(None);
    }
    Ok(Some(-classifier_logprob(clf, mel.values(), tokens, 0)? as f64))
}

/// What is known about one inpainted utterance.
pub struct EvalInput<'a> {
    pub reference: &'a MelSpectrogram<Float>,
    pub generated: &'a MelSpectrogram<Float>,
    pub mask: &'a FrameMask,
    pub reference_wave: Option<&'a Waveform<Float>>,
    pub generated_wave: Option<&'a Waveform<Float>>,
    pub transcript: Option<&'a str>,
    pub classifier: Option<(&'a Conformer<Float>, &'a TokenSequence)>,
}

/// Metric name and value, `None` where undefined.
pub fn evaluate_utterance(
    input: &EvalInput<'_>,
    stats: &MelStats,
    plugins: &MetricRegistry,
) -> Result<Vec<(String, Option<f64>)>> {
    let mut out = vec![
        ("masked_mse".to_string(), masked_mse(input.reference, input.generated, input.mask)),
        ("mcd".to_string(), Some(mcd(input.reference, input.generated, stats)?)),
    ];
    if let (Some(r), Some(g)) = (input.reference_wave, input.generated_wave) {
        out.push(("logf0_mse".into(), logf0_mse(r, g)?));
        let rs: Vec<f64> = r.samples().iter().map(|&v| v as f64).collect();
        let gs: Vec<f64> = g.samples().iter().map(|&v| v as f64).collect();
        for p in plugins.iter() {
            let v = p.score(&rs, &gs, input.transcript)?;
            out.push((p.name().to_string(), Some(v)));
        }
    }
    if let Some((clf, y)) = input.classifier {
        out.push(("ctc_loss".into(), final_ctc_loss(clf, input.generated, y)?));
    }
    Ok(out)
}

pub fn records_for(utterance_id: &str, values: Vec<(String, Option<f64>)>, config_hash: &str) -> Vec<MetricRecord> {
    values
        .into_iter()
        .map(|(metric, value)| MetricRecord {
            utterance_id: utterance_id.to_string(),
            metric,
            value,
            config_hash: config_hash.to_string(),
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportFiles {
    pub report_sha256: String,
    pub summary: Vec<MetricSummary>,
}

/// Writes `report.jsonl` and `summary.json` under `dir`.
pub fn write_report(dir: &Path, records: &[MetricRecord], config_hash: &str) -> Result<ReportFiles> {
    std::fs::create_dir_all(dir)?;
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(dir.join("report.jsonl"), &text)?;
    let summary = summarize(records);
    let files = ReportFiles {
        report_sha256: sha256_hex(text.as_bytes()),
        summary,
    };
    let body = serde_json::json!({
        "config_hash": config_hash,
        "mcd_definition": "(10/ln 10) * sqrt(2 * sum_{i=1..13} (c_i - c'_i)^2), mean over the DTW path",
        "report_sha256": files.report_sha256,
        "metrics": files.summary,
    });
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&body)?)?;
    Ok(files)
}

pub fn read_report(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

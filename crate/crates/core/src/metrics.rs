//! Objective evaluation: DTW, mel-cepstral distortion, log-F0 error.
//!
//! Cepstra are the orthonormal DCT-II of each log-mel frame, keeping
//! coefficients 1 to 13. MCD averages
//! `(10 / ln 10) * sqrt(2 * sum_i (c_i - c'_i)^2)` along the DTW path.
//! F0 comes from a normalized autocorrelation on the frontend's frame grid.
//! External scorers plug in through [`MetricRegistry`].

use std::collections::BTreeMap;
use std::f64::consts::{LN_10, PI};

use serde::{Deserialize, Serialize};

use crate::audio::{denormalize_log, frame_count, reflect, MelSpectrogram, MelStats, Waveform, HOP, HOP_SECONDS, N_FFT, SAMPLE_RATE};
use crate::{invalid, Real, Result};

pub const CEPSTRAL_ORDER: usize = 13;
pub const F0_MIN: f64 = 50.0;
pub const F0_MAX: f64 = 500.0;
/// `(10 / ln 10) * sqrt(2)`.
pub const MCD_SCALE: f64 = 10.0 / LN_10 * std::f64::consts::SQRT_2;

const VOICING_THRESHOLD: f64 = 0.6;
const SILENCE_RMS: f64 = 1e-4;

/// Optimal monotone alignment of two sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct DtwAlignment {
    /// Index pairs from `(0, 0)` to `(n1 - 1, n2 - 1)`.
    pub path: Vec<(usize, usize)>,
    pub cost: f64,
}

/// DTW over an `n1 x n2` cost grid with steps `(1,0)`, `(0,1)` and `(1,1)`.
/// Ties prefer the diagonal.
pub fn dtw(n1: usize, n2: usize, dist: impl Fn(usize, usize) -> f64) -> Result<DtwAlignment> {
    if n1 == 0 || n2 == 0 {
        return invalid("DTW needs two nonempty sequences");
    }
    let mut acc = vec![f64::INFINITY; n1 * n2];
    for i in 0..n1 {
        for j in 0..n2 {
            let d = dist(i, j);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[(i - 1) * n2 + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { acc[(i - 1) * n2 + j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i * n2 + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[i * n2 + j] = best + d;
        }
    }
    let mut path = vec![(n1 - 1, n2 - 1)];
    let (mut i, mut j) = (n1 - 1, n2 - 1);
    while i > 0 || j > 0 {
        let step = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = acc[(i - 1) * n2 + j - 1];
            let up = acc[(i - 1) * n2 + j];
            let left = acc[i * n2 + j - 1];
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        (i, j) = step;
        path.push(step);
    }
    path.reverse();
    Ok(DtwAlignment {
        path,
        cost: acc[n1 * n2 - 1],
    })
}

/// DTW between two slices under `dist`.
pub fn dtw_align<A, B>(a: &[A], b: &[B], dist: impl Fn(&A, &B) -> f64) -> Result<DtwAlignment> {
    dtw(a.len(), b.len(), |i, j| dist(&a[i], &b[j]))
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Per-frame mel-cepstral coefficients `c_1..c_13`.
#[derive(Clone, Debug, PartialEq)]
pub struct CepstralSequence {
    pub frames: Vec<[f64; CEPSTRAL_ORDER]>,
    pub hop_seconds: f64,
}

impl CepstralSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Orthonormal DCT-II coefficients `1..=13` of one frame.
pub fn dct_frame(v: &[f64]) -> [f64; CEPSTRAL_ORDER] {
    let n = v.len() as f64;
    let scale = (2.0 / n).sqrt();
    let mut out = [0.0; CEPSTRAL_ORDER];
    for (k, c) in out.iter_mut().enumerate() {
        let k = (k + 1) as f64;
        *c = scale
            * v.iter()
                .enumerate()
                .map(|(i, x)| x * (PI * k * (i as f64 + 0.5) / n).cos())
                .sum::<f64>();
    }
    out
}

/// Cepstra of a log-mel array `[bins, L]`.
pub fn cepstrum_of_log_mel<T: Real>(log_mel: &crate::Tensor<T>) -> CepstralSequence {
    let (bins, frames) = (log_mel.rows(), log_mel.cols());
    let mut col = vec![0.0; bins];
    let frames = (0..frames)
        .map(|j| {
            for (b, c) in col.iter_mut().enumerate() {
                *c = log_mel.at(b, j).as_f64();
            }
            dct_frame(&col)
        })
        .collect();
    CepstralSequence {
        frames,
        hop_seconds: HOP_SECONDS,
    }
}

/// Cepstra of a normalized spectrogram, computed on its log-mel values.
pub fn mel_cepstrum<T: Real>(x: &MelSpectrogram<T>, stats: &MelStats) -> CepstralSequence {
    cepstrum_of_log_mel(&denormalize_log(x.values(), stats))
}

/// MCD in dB between two cepstral sequences, averaged along the DTW path.
pub fn mcd_cepstra(a: &CepstralSequence, b: &CepstralSequence) -> Result<f64> {
    let al = dtw_align(&a.frames, &b.frames, |x, y| euclidean(x, y))?;
    Ok(MCD_SCALE * al.cost / al.path.len() as f64)
}

pub fn mcd<T: Real>(reference: &MelSpectrogram<T>, generated: &MelSpectrogram<T>, stats: &MelStats) -> Result<f64> {
    mcd_cepstra(&mel_cepstrum(reference, stats), &mel_cepstrum(generated, stats))
}

/// Per-frame fundamental frequency in Hz, 0 where unvoiced.
#[derive(Clone, Debug, PartialEq)]
pub struct F0Contour {
    pub f0: Vec<f64>,
    pub hop_seconds: f64,
}

impl F0Contour {
    pub fn voiced_count(&self) -> usize {
        self.f0.iter().filter(|&&f| f > 0.0).count()
    }
}

/// Autocorrelation pitch of each analysis frame.
///
/// Frames are the frontend's: 640 samples centred every 160 with reflected
/// edges. The lag search covers 50 to 500 Hz; the first peak reaching 90%
/// of the best normalized correlation wins, refined by a parabola. Frames
/// below the voicing threshold or near silence report 0.
pub fn f0_extract<T: Real>(w: &Waveform<T>) -> F0Contour {
    let x: Vec<f64> = w.samples().iter().map(|s| s.as_f64()).collect();
    let n = x.len();
    let rate = SAMPLE_RATE as f64;
    let min_lag = (rate / F0_MAX).floor() as usize;
    let max_lag = (rate / F0_MIN).ceil() as usize;
    let half = (N_FFT / 2) as isize;
    let mut frame = vec![0.0; N_FFT];
    let mut r = vec![0.0; max_lag + 2];
    let f0 = (0..frame_count(n))
        .map(|j| {
            let start = (j * HOP) as isize - half;
            for (k, f) in frame.iter_mut().enumerate() {
                *f = x[reflect(start + k as isize, n)];
            }
            let rms = (frame.iter().map(|v| v * v).sum::<f64>() / N_FFT as f64).sqrt();
            if rms < SILENCE_RMS {
                return 0.0;
            }
            for (lag, rv) in r.iter_mut().enumerate().skip(min_lag.saturating_sub(1)) {
                let (a, b) = (&frame[..N_FFT - lag], &frame[lag..]);
                let num: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                let den = (a.iter().map(|v| v * v).sum::<f64>() * b.iter().map(|v| v * v).sum::<f64>()).sqrt();
                *rv = if den > 0.0 { num / den } else { 0.0 };
            }
            let best = (min_lag..=max_lag).map(|l| r[l]).fold(f64::NEG_INFINITY, f64::max);
            if best < VOICING_THRESHOLD {
                return 0.0;
            }
            let Some(lag) = (min_lag..=max_lag).find(|&l| r[l] >= 0.9 * best && r[l] >= r[l - 1] && r[l] >= r[l + 1]) else {
                return 0.0;
            };
            let (y0, y1, y2) = (r[lag - 1], r[lag], r[lag + 1]);
            let denom = y0 - 2.0 * y1 + y2;
            let shift = if denom.abs() > 1e-12 { 0.5 * (y0 - y2) / denom } else { 0.0 };
            rate / (lag as f64 + shift.clamp(-0.5, 0.5))
        })
        .collect();
    F0Contour {
        f0,
        hop_seconds: HOP_SECONDS,
    }
}

/// Mean squared natural-log F0 difference over DTW-aligned frame pairs
/// voiced in both contours. `None` when no aligned pair is voiced in both.
pub fn logf0_mse_contours(a: &F0Contour, b: &F0Contour) -> Result<Option<f64>> {
    let lf = |f: &f64| if *f > 0.0 { f.ln() } else { 0.0 };
    let la: Vec<f64> = a.f0.iter().map(lf).collect();
    let lb: Vec<f64> = b.f0.iter().map(lf).collect();
    let al = dtw_align(&la, &lb, |x, y| (x - y).abs())?;
    let pairs: Vec<f64> = al
        .path
        .iter()
        .filter(|&&(i, j)| a.f0[i] > 0.0 && b.f0[j] > 0.0)
        .map(|&(i, j)| (la[i] - lb[j]).powi(2))
        .collect();
    if pairs.is_empty() {
        return Ok(None);
    }
    Ok(Some(pairs.iter().sum::<f64>() / pairs.len() as f64))
}

pub fn logf0_mse<T: Real>(reference: &Waveform<T>, generated: &Waveform<T>) -> Result<Option<f64>> {
    if reference.is_empty() || generated.is_empty() {
        return invalid("log-F0 error needs nonempty waveforms");
    }
    logf0_mse_contours(&f0_extract(reference), &f0_extract(generated))
}

/// An external scorer such as a recognizer-based error rate.
pub trait MetricPlugin: Send + Sync {
    fn name(&self) -> &str;

    fn score(&self, reference: &[f64], generated: &[f64], transcript: Option<&str>) -> Result<f64>;
}

#[derive(Default)]
pub struct MetricRegistry {
    plugins: Vec<Box<dyn MetricPlugin>>,
}

impl MetricRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, plugin: Box<dyn MetricPlugin>) -> Result<()> {
        if self.get(plugin.name()).is_some() {
            return invalid(format!("metric `{}` is already registered", plugin.name()));
        }
        self.plugins.push(plugin);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&dyn MetricPlugin> {
        self.plugins.iter().find(|p| p.name() == name).map(|p| p.as_ref())
    }

    pub fn names(&self) -> Vec<&str> {
        self.plugins.iter().map(|p| p.name()).collect()
    }

    /// The registered plugins among `names`; absent ones are logged and
    /// left out.
    pub fn select(&self, names: &[&str]) -> Vec<&dyn MetricPlugin> {
        names
            .iter()
            .filter_map(|n| {
                let p = self.get(n);
                if p.is_none() {
                    log::info!("metric `{n}` has no registered scorer; skipped");
                }
                p
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn MetricPlugin> {
        self.plugins.iter().map(|p| p.as_ref())
    }
}

/// One line of an evaluation report. `value` is `None` when the metric is
/// undefined for the utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub utterance_id: String,
    pub metric: String,
    pub value: Option<f64>,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub count: usize,
    pub undefined: usize,
    pub median: Option<f64>,
    pub mean: Option<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

/// Median and mean per metric, in metric-name order.
pub fn summarize(records: &[MetricRecord]) -> Vec<MetricSummary> {
    let mut by: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        let e = by.entry(&r.metric).or_default();
        match r.value {
            Some(v) if v.is_finite() => e.0.push(v),
            _ => e.1 += 1,
        }
    }
    by.into_iter()
        .map(|(metric, (vals, undefined))| MetricSummary {
            metric: metric.to_string(),
            count: vals.len(),
            undefined,
            median: median(&vals),
            mean: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64) -> Waveform<f64> {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        Waveform::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn dtw_small_cases() {
        let a = [0.0f64, 1.0];
        let b = [0.0f64, 1.0, 1.0];
        let al = dtw_align(&a, &b, |x: &f64, y: &f64| (x - y).abs()).unwrap();
        assert_eq!(al.cost, 0.0);
        let same = dtw_align(&b, &b, |x: &f64, y: &f64| (x - y).abs()).unwrap();
        assert_eq!(same.path, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(dtw(0, 3, |_, _| 0.0).is_err());
    }

    #[test]
    fn dct_of_constant_and_basis() {
        assert!(dct_frame(&[3.0; 80]).iter().all(|c| c.abs() < 1e-12));
        let basis: Vec<f64> = (0..80).map(|i| (PI * 2.0 * (i as f64 + 0.5) / 80.0).cos()).collect();
        let c = dct_frame(&basis);
        for (k, v) in c.iter().enumerate() {
            if k + 1 == 2 {
                assert!((v - (40.0f64).sqrt()).abs() < 1e-9);
            } else {
                assert!(v.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mcd_closed_form_shift() {
        let frames: Vec<[f64; 13]> = (0..4).map(|i| [i as f64 * 0.1; 13]).collect();
        let a = CepstralSequence {
            frames: frames.clone(),
            hop_seconds: HOP_SECONDS,
        };
        let mut b = a.clone();
        for f in &mut b.frames {
            f[0] += 0.01;
        }
        assert_eq!(mcd_cepstra(&a, &a).unwrap(), 0.0);
        assert!((mcd_cepstra(&a, &b).unwrap() - MCD_SCALE * 0.01).abs() < 1e-12);
    }

    #[test]
    fn f0_of_tones_and_silence() {
        let c = f0_extract(&tone(200.0, 0.5));
        assert!(c.voiced_count() > 40);
        for f in c.f0.iter().filter(|&&f| f > 0.0) {
            assert!((f - 200.0).abs() <= 2.0, "{f}");
        }
        let quiet = Waveform::new(vec![0.0f64; 8000], SAMPLE_RATE).unwrap();
        assert_eq!(f0_extract(&quiet).voiced_count(), 0);
        assert_eq!(logf0_mse(&quiet, &tone(100.0, 0.5)).unwrap(), None);
    }

    #[test]
    fn summary_medians() {
        let rec = |m: &str, v: Option<f64>| MetricRecord {
            utterance_id: "u".into(),
            metric: m.into(),
            value: v,
            config_hash: "h".into(),
        };
        let s = summarize(&[rec("mcd", Some(1.0)), rec("mcd", Some(3.0)), rec("mcd", None), rec("f0", Some(2.0))]);
        assert_eq!(s[1].metric, "mcd");
        assert_eq!(s[1].median, Some(2.0));
        assert_eq!(s[1].undefined, 1);
        assert_eq!(s[0].mean, Some(2.0));
    }
}

//! Frame masks.
//!
//! A mask flags every spectrogram frame as observed (`true`) or missing
//! (`false`); the same flag applies to all mel bins of the frame. Training
//! masks scatter several short gaps at random with clean margins at both
//! ends, evaluation masks place gaps of a fixed length on a regular grid.
//!
//! Times convert to frames with `floor` for starts and `ceil` for
//! durations, each with a small tolerance so grid-aligned seconds land on
//! the frame they name.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{MelSpectrogram, HOP, HOP_SECONDS};
use crate::{invalid, Error, Real, Result, Tensor};

const FRAME_TOL: f64 = 1e-6;
const PLACEMENT_RETRIES: usize = 100;

fn floor_frames(seconds: f64, hop: f64) -> usize {
    (seconds / hop + FRAME_TOL).floor().max(0.0) as usize
}

fn ceil_frames(seconds: f64, hop: f64) -> usize {
    (seconds / hop - FRAME_TOL).ceil().max(0.0) as usize
}

/// Per-frame observation flags.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMask {
    flags: Vec<bool>,
    hop_seconds: f64,
}

impl FrameMask {
    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self {
            flags,
            hop_seconds: HOP_SECONDS,
        }
    }

    pub fn all_observed(frames: usize) -> Self {
        Self::from_flags(vec![true; frames])
    }

    pub fn all_masked(frames: usize) -> Self {
        Self::from_flags(vec![false; frames])
    }

    /// Masks the given frame ranges.
    pub fn from_ranges(frames: usize, ranges: &[Range<usize>]) -> Result<Self> {
        let mut flags = vec![true; frames];
        for r in ranges {
            if r.start >= r.end || r.end > frames {
                return invalid(format!("masked range {r:?} does not fit {frames} frames"));
            }
            flags[r.clone()].iter_mut().for_each(|f| *f = false);
        }
        Ok(Self::from_flags(flags))
    }

    /// Masks the given `[start, end)` second intervals.
    pub fn from_intervals(frames: usize, intervals: &[(f64, f64)]) -> Result<Self> {
        let hop = HOP_SECONDS;
        let ranges: Vec<Range<usize>> = intervals
            .iter()
            .map(|&(s, e)| {
                if !(s.is_finite() && e.is_finite()) || s < 0.0 || e <= s {
                    return invalid(format!("bad masked interval [{s}, {e})"));
                }
                let a = floor_frames(s, hop);
                let b = ceil_frames(e, hop).min(frames);
                Ok(a..b)
            })
            .collect::<Result<_>>()?;
        Self::from_ranges(frames, &ranges)
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop_seconds
    }

    pub fn is_observed(&self, frame: usize) -> bool {
        self.flags[frame]
    }

    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|f| !**f).count()
    }

    /// Maximal runs of masked frames, left to right.
    pub fn masked_ranges(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = None;
        for (j, &obs) in self.flags.iter().enumerate() {
            match (obs, start) {
                (false, None) => start = Some(j),
                (true, Some(s)) => {
                    out.push(s..j);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push(s..self.flags.len());
        }
        out
    }

    /// Masked runs in seconds.
    pub fn masked_intervals(&self) -> Vec<(f64, f64)> {
        self.masked_ranges()
            .into_iter()
            .map(|r| (r.start as f64 * self.hop_seconds, r.end as f64 * self.hop_seconds))
            .collect()
    }

    /// The mask broadcast to `[bins, L]` with 1 on observed frames.
    pub fn expand<T: Real>(&self, bins: usize) -> Tensor<T> {
        let l = self.flags.len();
        Tensor::from_fn(&[bins, l], |i| if self.flags[i % l] { T::one() } else { T::zero() })
    }

    /// The mask at sample resolution for a waveform of `n` samples.
    pub fn sample_flags(&self, n: usize) -> Vec<bool> {
        (0..n)
            .map(|i| self.flags.get(i / HOP).copied().unwrap_or(true))
            .collect()
    }

    /// One `start_s end_s` line per masked run.
    pub fn to_text(&self) -> String {
        let round = |v: f64| (v * 1e9).round() / 1e9;
        let mut s = String::new();
        for (a, b) in self.masked_intervals() {
            let _ = writeln!(s, "{} {}", round(a), round(b));
        }
        s
    }

    pub fn from_text(frames: usize, text: &str) -> Result<Self> {
        let mut intervals = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => intervals.push((a, b)),
                _ => return invalid(format!("mask line {}: expected `start_s end_s`", no + 1)),
            }
        }
        Self::from_intervals(frames, &intervals)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path, frames: usize) -> Result<Self> {
        Self::from_text(frames, &std::fs::read_to_string(path)?)
    }
}

/// Zeroes the masked frames of `x`.
pub fn apply_mask<T: Real>(x: &MelSpectrogram<T>, m: &FrameMask) -> Result<MelSpectrogram<T>> {
    Ok(MelSpectrogram::new(mask_tensor(x.values(), m)?, x.is_normalized())?)
}

/// Zeroes masked columns of any `[rows, L]` tensor.
pub fn mask_tensor<T: Real>(x: &Tensor<T>, m: &FrameMask) -> Result<Tensor<T>> {
    if x.ndim() != 2 || x.cols() != m.len() {
        return invalid(format!("mask of {} frames does not match shape {:?}", m.len(), x.shape()));
    }
    let l = m.len();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !m.flags[i % l] {
            *v = T::zero();
        }
    }
    Ok(out)
}

/// Zeroes the samples of masked frames.
pub fn mask_samples<T: Real>(samples: &[T], m: &FrameMask) -> Vec<T> {
    samples
        .iter()
        .zip(m.sample_flags(samples.len()))
        .map(|(&s, keep)| if keep { s } else { T::zero() })
        .collect()
}

/// Geometry of random training masks, in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMaskSpec {
    pub margin_s: f64,
    pub min_sep_s: f64,
    pub dur_min_s: f64,
    pub dur_max_s: f64,
}

impl Default for TrainMaskSpec {
    fn default() -> Self {
        Self {
            margin_s: 0.5,
            min_sep_s: 0.3,
            dur_min_s: 0.3,
            dur_max_s: 0.65,
        }
    }
}

impl TrainMaskSpec {
    pub fn validate(&self) -> Result<()> {
        let all = [self.margin_s, self.min_sep_s, self.dur_min_s, self.dur_max_s];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Config(format!("training mask values must be positive: {self:?}")));
        }
        if self.dur_min_s > self.dur_max_s {
            return Err(Error::Config("dur_min_s exceeds dur_max_s".into()));
        }
        Ok(())
    }
}

/// Geometry of evaluation masks, in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalMaskSpec {
    pub gap_s: f64,
    pub spacing_s: f64,
    pub margin_s: f64,
}

impl EvalMaskSpec {
    /// Gaps of `gap_s` separated by 1.5 s of context, 1.5 s margins.
    pub fn with_text(gap_s: f64) -> Self {
        Self {
            gap_s,
            spacing_s: 1.5,
            margin_s: 1.5,
        }
    }

    /// Short gaps every 0.25 s, for transcript-free restoration.
    pub fn dense(gap_s: f64) -> Self {
        Self {
            gap_s,
            spacing_s: 0.25,
            margin_s: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.gap_s, self.spacing_s, self.margin_s];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Config(format!("evaluation mask values must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Smallest region count a training mask of `duration_s` must hold:
/// `max(1, floor((N - 2 margin) / (min_sep + dur_max)))`.
pub fn min_region_count(duration_s: f64, spec: &TrainMaskSpec) -> Result<usize> {
    spec.validate()?;
    let usable = duration_s - 2.0 * spec.margin_s;
    if usable <= 0.0 {
        return Err(Error::InfeasibleMask(format!(
            "{duration_s} s cannot hold two {} s margins",
            spec.margin_s
        )));
    }
    let n = ((usable + 1e-9) / (spec.min_sep_s + spec.dur_max_s)).floor() as usize;
    Ok(n.max(1))
}

struct FrameGeometry {
    lo: usize,
    hi: usize,
    sep: usize,
    dmin: usize,
    dmax: usize,
}

impl FrameGeometry {
    fn new(frames: usize, spec: &TrainMaskSpec) -> Result<Self> {
        let hop = HOP_SECONDS;
        let margin = ceil_frames(spec.margin_s, hop);
        let g = Self {
            lo: margin,
            hi: frames.saturating_sub(margin),
            sep: ceil_frames(spec.min_sep_s, hop),
            dmin: ceil_frames(spec.dur_min_s, hop).max(1),
            dmax: floor_frames(spec.dur_max_s, hop),
        };
        if g.dmin > g.dmax {
            return Err(Error::InfeasibleMask(format!(
                "no whole-frame duration lies in [{}, {}] s",
                spec.dur_min_s, spec.dur_max_s
            )));
        }
        Ok(g)
    }

    fn fits(&self, count: usize) -> bool {
        count * self.dmin + count.saturating_sub(1) * self.sep <= self.hi.saturating_sub(self.lo)
    }
}

fn place<R: Rng + ?Sized>(g: &FrameGeometry, count: usize, rng: &mut R) -> Option<Vec<Range<usize>>> {
    let mut cursor = g.lo;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let rest = count - 1 - i;
        let reserve = rest * (g.sep + g.dmin);
        let room = g.hi.checked_sub(cursor + reserve)?;
        if room < g.dmin {
            return None;
        }
        let dur = rng.random_range(g.dmin..=g.dmax.min(room));
        let start = rng.random_range(cursor..=g.hi - reserve - dur);
        out.push(start..start + dur);
        cursor = start + dur + g.sep;
    }
    Some(out)
}

/// Random training mask over `frames` frames.
///
/// The region count is uniform in `[k, k + 2]` with `k` from
/// [`min_region_count`]; regions are placed left to right. A count that
/// does not fit falls back to `k`.
pub fn sample_training_mask<R: Rng + ?Sized>(frames: usize, spec: &TrainMaskSpec, rng: &mut R) -> Result<FrameMask> {
    spec.validate()?;
    let duration = frames as f64 * HOP_SECONDS;
    if duration + 1e-9 < 2.0 * spec.margin_s + spec.dur_min_s {
        return Err(Error::InfeasibleMask(format!(
            "{duration} s is shorter than two margins plus one minimum gap ({} s)",
            2.0 * spec.margin_s + spec.dur_min_s
        )));
    }
    let k = min_region_count(duration, spec)?;
    let g = FrameGeometry::new(frames, spec)?;
    if !g.fits(k) {
        return Err(Error::InfeasibleMask(format!(
            "{k} regions of >= {} frames with {} frame separation do not fit frames {}..{}",
            g.dmin, g.sep, g.lo, g.hi
        )));
    }
    let wanted = rng.random_range(k..=k + 2);
    for count in [wanted, k] {
        if !g.fits(count) {
            continue;
        }
        for _ in 0..PLACEMENT_RETRIES {
            if let Some(ranges) = place(&g, count, rng) {
                return FrameMask::from_ranges(frames, &ranges);
            }
        }
    }
    Err(Error::InfeasibleMask(format!("could not place {k} regions in {frames} frames")))
}

/// Every way `m` breaks the training-mask constraints, empty when valid.
pub fn training_mask_violations(m: &FrameMask, spec: &TrainMaskSpec) -> Vec<String> {
    let hop = m.hop_seconds();
    let tol = 1e-9;
    let total = m.len() as f64 * hop;
    let ranges = m.masked_ranges();
    let mut out = Vec::new();
    match min_region_count(total, spec) {
        Ok(k) if ranges.len() < k => out.push(format!("{} regions, need at least {k}", ranges.len())),
        Err(e) => out.push(e.to_string()),
        _ => {}
    }
    for (i, r) in ranges.iter().enumerate() {
        let (s, e) = (r.start as f64 * hop, r.end as f64 * hop);
        if s + tol < spec.margin_s {
            out.push(format!("region {i} starts at {s} s inside the leading margin"));
        }
        if e > total - spec.margin_s + tol {
            out.push(format!("region {i} ends at {e} s inside the trailing margin"));
        }
        let d = e - s;
        if d + tol < spec.dur_min_s || d > spec.dur_max_s + tol {
            out.push(format!("region {i} lasts {d} s"));
        }
        if i > 0 {
            let gap = s - ranges[i - 1].end as f64 * hop;
            if gap + tol < spec.min_sep_s {
                out.push(format!("regions {} and {i} are {gap} s apart", i - 1));
            }
        }
    }
    out
}

/// Evaluation mask: gaps of `gap_s` starting at `margin_s`, each next gap
/// `spacing_s` after the previous one ends, while a gap still ends before
/// the trailing margin.
pub fn build_eval_mask(frames: usize, spec: &EvalMaskSpec) -> Result<FrameMask> {
    spec.validate()?;
    let hop = HOP_SECONDS;
    let total = frames as f64 * hop;
    let gap_frames = ceil_frames(spec.gap_s, hop).max(1);
    let mut ranges = Vec::new();
    for i in 0.. {
        let start = spec.margin_s + i as f64 * (spec.gap_s + spec.spacing_s);
        if start + spec.gap_s > total - spec.margin_s + 1e-9 {
            break;
        }
        let a = floor_frames(start, hop);
        ranges.push(a..(a + gap_frames).min(frames));
    }
    if ranges.is_empty() {
        return Err(Error::InfeasibleMask(format!(
            "a {total} s utterance holds no {} s gap between {} s margins",
            spec.gap_s, spec.margin_s
        )));
    }
    FrameMask::from_ranges(frames, &ranges)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn intervals(m: &FrameMask) -> Vec<(f64, f64)> {
        m.masked_intervals()
            .into_iter()
            .map(|(a, b)| ((a * 1e6).round() / 1e6, (b * 1e6).round() / 1e6))
            .collect()
    }

    #[test]
    fn region_count_formula() {
        let spec = TrainMaskSpec::default();
        assert_eq!(min_region_count(3.0, &spec).unwrap(), 2);
        assert_eq!(min_region_count(1.5, &spec).unwrap(), 1);
        assert_eq!(min_region_count(10.45, &spec).unwrap(), 9);
        assert!(min_region_count(1.0, &spec).is_err());
    }

    #[test]
    fn eval_mask_large_gaps() {
        let m = build_eval_mask(700, &EvalMaskSpec::with_text(1.0)).unwrap();
        assert_eq!(intervals(&m), vec![(1.5, 2.5), (4.0, 5.0)]);
    }

    #[test]
    fn eval_mask_small_gaps() {
        let m = build_eval_mask(700, &EvalMaskSpec::with_text(0.25)).unwrap();
        assert_eq!(intervals(&m), vec![(1.5, 1.75), (3.25, 3.5), (5.0, 5.25)]);
    }

    #[test]
    fn eval_mask_dense_fraction() {
        let spec = EvalMaskSpec::dense(0.1);
        let m = build_eval_mask(1000, &spec).unwrap();
        let interior = m.len() - 2 * 50;
        let frac = m.masked_count() as f64 / interior as f64;
        assert!((frac - 0.1 / 0.35).abs() < 0.02, "{frac}");
    }

    #[test]
    fn eval_mask_needs_room() {
        assert!(build_eval_mask(300, &EvalMaskSpec::with_text(1.0)).is_err());
    }

    #[test]
    fn training_mask_four_seconds_is_valid_and_deterministic() {
        let spec = TrainMaskSpec::default();
        for seed in 0..200 {
            let a = sample_training_mask(400, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = sample_training_mask(400, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
            assert_eq!(training_mask_violations(&a, &spec), Vec::<String>::new());
        }
    }

    #[test]
    fn training_mask_rejects_short_input() {
        let spec = TrainMaskSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_training_mask(120, &spec, &mut rng),
            Err(Error::InfeasibleMask(_))
        ));
        assert!(sample_training_mask(130, &spec, &mut rng).is_ok());
    }

    #[test]
    fn apply_mask_cases() {
        let x = MelSpectrogram::new(Tensor::from_fn(&[80, 5], |i| (i as f64 * 0.01).sin()), true).unwrap();
        assert_eq!(apply_mask(&x, &FrameMask::all_observed(5)).unwrap(), x);
        let z = apply_mask(&x, &FrameMask::all_masked(5)).unwrap();
        assert!(z.values().data().iter().all(|&v| v == 0.0));
        let one = apply_mask(&x, &FrameMask::from_ranges(5, &[2..3]).unwrap()).unwrap();
        for b in 0..80 {
            for j in 0..5 {
                let want = if j == 2 { 0.0 } else { x.values().at(b, j) };
                assert_eq!(one.values().at(b, j).to_bits(), want.to_bits());
            }
        }
        assert!(apply_mask(&x, &FrameMask::all_observed(4)).is_err());
    }

    #[test]
    fn mask_text_round_trip() {
        let m = FrameMask::from_ranges(300, &[3..40, 150..151, 290..300]).unwrap();
        let text = m.to_text();
        assert_eq!(FrameMask::from_text(300, &text).unwrap(), m);
        assert_eq!(FrameMask::from_text(300, &text).unwrap().to_text(), text);
        assert!(FrameMask::from_text(300, "1.0\n").is_err());
    }
}

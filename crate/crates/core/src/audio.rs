//! Waveform analysis and resynthesis.
//!
//! Frames are 640-sample Hann windows every 160 samples (40 ms and 10 ms at
//! 16 kHz) taken over a reflect-padded signal, so `n` samples always give
//! `ceil(n / 160)` frames. Magnitudes are projected onto 80 HTK-mel
//! triangles spanning 20 Hz to 8 kHz, log-compressed with a floor of `1e-5`
//! and mapped linearly onto `[-1, 1]` using corpus-wide extremes
//! ([`MelStats`]).
//!
//! Going back, [`griffin_lim_invert`] undoes the normalization, lifts the mel
//! bands to a linear spectrum with the filterbank pseudo-inverse and
//! recovers a phase by Griffin-Lim iteration.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::{invalid, Error, Real, Result, Tensor};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 640;
pub const HOP: usize = 160;
pub const HOP_SECONDS: f64 = HOP as f64 / SAMPLE_RATE as f64;
pub const N_LINEAR: usize = N_FFT / 2 + 1;
pub const N_MELS: usize = 80;
pub const F_MIN: f64 = 20.0;
pub const F_MAX: f64 = 8000.0;
pub const LOG_FLOOR: f64 = 1e-5;
pub const GRIFFIN_LIM_ITERS: usize = 60;

/// Mono 16 kHz audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform<T> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Real> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return invalid(format!("sample rate {sample_rate} Hz, expected {SAMPLE_RATE}"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return invalid("waveform contains non-finite samples");
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Number of analysis frames this waveform produces.
    pub fn frame_count(&self) -> usize {
        frame_count(self.samples.len())
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.samples.iter().map(|s| s.as_f64().powi(2)).sum();
        (ss / self.samples.len() as f64).sqrt()
    }
}

/// Frames produced from `n` samples.
pub fn frame_count(n: usize) -> usize {
    n.div_ceil(HOP)
}

/// An 80-band log-mel spectrogram stored as `[bins, frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram<T> {
    values: Tensor<T>,
    normalized: bool,
}

impl<T: Real> MelSpectrogram<T> {
    /// Wraps `[80, L]` values. Normalized spectrograms must lie in `[-1, 1]`.
    pub fn new(values: Tensor<T>, normalized: bool) -> Result<Self> {
        if values.ndim() != 2 || values.shape()[0] != N_MELS || values.shape()[1] == 0 {
            return invalid(format!(
                "mel spectrogram must be [{N_MELS}, L>=1], got {:?}",
                values.shape()
            ));
        }
        if !values.all_finite() {
            return invalid("mel spectrogram contains non-finite values");
        }
        if normalized && values.data().iter().any(|v| v.abs() > T::one()) {
            return invalid("normalized mel spectrogram has values outside [-1, 1]");
        }
        Ok(Self { values, normalized })
    }

    /// A normalized spectrogram of silence at the floor.
    pub fn floor(frames: usize) -> Result<Self> {
        Self::new(Tensor::full(&[N_MELS, frames], -T::one()), true)
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn bins(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn hop_seconds(&self) -> f64 {
        HOP_SECONDS
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Log-domain extremes used to map log-mel values onto `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MelStats {
    pub global_min: f64,
    pub global_max: f64,
}

impl MelStats {
    pub fn new(global_min: f64, global_max: f64) -> Result<Self> {
        if !(global_min.is_finite() && global_max.is_finite()) || global_min >= global_max {
            return invalid(format!(
                "degenerate mel stats: min {global_min} must be below max {global_max}"
            ));
        }
        Ok(Self {
            global_min,
            global_max,
        })
    }

    /// Extremes over a collection of log-mel arrays.
    pub fn fit<'a, T: Real>(log_mels: impl IntoIterator<Item = &'a Tensor<T>>) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for m in log_mels {
            for &v in m.data() {
                lo = lo.min(v.as_f64());
                hi = hi.max(v.as_f64());
            }
        }
        if lo == f64::INFINITY {
            return invalid("cannot fit mel stats on an empty set");
        }
        Self::new(lo, hi)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "global_min = {:?}", self.global_min);
        let _ = writeln!(s, "global_max = {:?}", self.global_max);
        let _ = writeln!(s, "n_fft = {N_FFT}");
        let _ = writeln!(s, "hop = {HOP}");
        let _ = writeln!(s, "n_mels = {N_MELS}");
        let _ = writeln!(s, "fmin = {F_MIN:?}");
        let _ = writeln!(s, "fmax = {F_MAX:?}");
        s
    }

    /// Parses [`MelStats::to_text`] output, rejecting files written for a
    /// different frontend configuration.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut min = None;
        let mut max = None;
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("stats line {}: expected `key = value`", no + 1)))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("stats line {}: bad number", no + 1)))?;
            let expect = |want: f64| {
                if value == want {
                    Ok(())
                } else {
                    invalid(format!("stats {} = {value}, this build uses {want}", key.trim()))
                }
            };
            match key.trim() {
                "global_min" => min = Some(value),
                "global_max" => max = Some(value),
                "n_fft" => expect(N_FFT as f64)?,
                "hop" => expect(HOP as f64)?,
                "n_mels" => expect(N_MELS as f64)?,
                "fmin" => expect(F_MIN)?,
                "fmax" => expect(F_MAX)?,
                other => return invalid(format!("unknown stats key `{other}`")),
            }
        }
        match (min, max) {
            (Some(a), Some(b)) => Self::new(a, b),
            _ => invalid("stats file lacks global_min or global_max"),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn hann<T: Real>() -> Vec<T> {
    (0..N_FFT)
        .map(|k| T::lit(0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / N_FFT as f64).cos()))
        .collect()
}

/// Index into a signal of length `n` under repeated reflection about its
/// end samples.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let k = i.rem_euclid(period);
    if k >= n as isize {
        (period - k) as usize
    } else {
        k as usize
    }
}

struct Stft<T: Real> {
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
    window: Vec<T>,
}

impl<T: Real> Stft<T> {
    fn new() -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(N_FFT),
            inverse: planner.plan_fft_inverse(N_FFT),
            window: hann(),
        }
    }

    /// One-sided spectra, one row of [`N_LINEAR`] bins per frame.
    fn analyze(&self, x: &[T]) -> Vec<Vec<Complex<T>>> {
        let n = x.len();
        let half = (N_FFT / 2) as isize;
        let mut buf = vec![Complex::new(T::zero(), T::zero()); N_FFT];
        (0..frame_count(n))
            .map(|j| {
                let start = (j * HOP) as isize - half;
                for (k, b) in buf.iter_mut().enumerate() {
                    let s = x[reflect(start + k as isize, n)];
                    *b = Complex::new(s * self.window[k], T::zero());
                }
                self.forward.process(&mut buf);
                buf[..N_LINEAR].to_vec()
            })
            .collect()
    }

    /// Weighted overlap-add inverse producing `frames * HOP` samples.
    fn synthesize(&self, spectra: &[Vec<Complex<T>>]) -> Vec<T> {
        let frames = spectra.len();
        let half = N_FFT / 2;
        let padded = (frames - 1) * HOP + N_FFT;
        let mut acc = vec![T::zero(); padded];
        let mut wsum = vec![T::zero(); padded];
        let scale = T::one() / T::lit(N_FFT as f64);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); N_FFT];
        for (j, spec) in spectra.iter().enumerate() {
            buf[..N_LINEAR].copy_from_slice(spec);
            for k in N_LINEAR..N_FFT {
                buf[k] = spec[N_FFT - k].conj();
            }
            self.inverse.process(&mut buf);
            for k in 0..N_FFT {
                let w = self.window[k];
                acc[j * HOP + k] += buf[k].re * scale * w;
                wsum[j * HOP + k] += w * w;
            }
        }
        let tiny = T::lit(1e-8);
        (0..frames * HOP)
            .map(|i| {
                let p = i + half;
                if wsum[p] > tiny {
                    acc[p] / wsum[p]
                } else {
                    T::zero()
                }
            })
            .collect()
    }
}

/// Magnitude STFT as `[321, L]` with `L = ceil(n / 160)`.
pub fn stft_magnitude<T: Real>(w: &Waveform<T>) -> Result<Tensor<T>> {
    if w.is_empty() {
        return invalid("cannot analyze an empty waveform");
    }
    let spectra = Stft::new().analyze(w.samples());
    let frames = spectra.len();
    Ok(Tensor::from_fn(&[N_LINEAR, frames], |i| {
        let (bin, j) = (i / frames, i % frames);
        spectra[j][bin].norm()
    }))
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filterbank, row-major `[80, 321]`, peak weight 1.
pub fn mel_filterbank() -> &'static [f64] {
    static FB: OnceLock<Vec<f64>> = OnceLock::new();
    FB.get_or_init(|| {
        let (lo, hi) = (hz_to_mel(F_MIN), hz_to_mel(F_MAX));
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
        let mut fb = vec![0.0; N_MELS * N_LINEAR];
        for m in 0..N_MELS {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..N_LINEAR {
                let f = k as f64 * bin_hz;
                let up = (f - l) / (c - l);
                let down = (r - f) / (r - c);
                fb[m * N_LINEAR + k] = up.min(down).max(0.0);
            }
        }
        fb
    })
}

/// Pseudo-inverse of the filterbank, row-major `[321, 80]`.
fn mel_pinv() -> &'static [f64] {
    static PINV: OnceLock<Vec<f64>> = OnceLock::new();
    PINV.get_or_init(|| {
        let fb = nalgebra::DMatrix::from_row_slice(N_MELS, N_LINEAR, mel_filterbank());
        let pinv = fb
            .pseudo_inverse(1e-10)
            .expect("filterbank SVD does not fail for a finite matrix");
        let mut out = vec![0.0; N_LINEAR * N_MELS];
        for r in 0..N_LINEAR {
            for c in 0..N_MELS {
                out[r * N_MELS + c] = pinv[(r, c)];
            }
        }
        out
    })
}

fn matrix<T: Real>(rows: usize, cols: usize, data: &[f64]) -> Tensor<T> {
    Tensor::from_fn(&[rows, cols], |i| T::lit(data[i]))
}

/// Projects a `[321, L]` magnitude spectrogram onto the mel bands.
pub fn mel_project<T: Real>(mag: &Tensor<T>) -> Result<Tensor<T>> {
    if mag.ndim() != 2 || mag.shape()[0] != N_LINEAR {
        return invalid(format!("expected [{N_LINEAR}, L] magnitudes, got {:?}", mag.shape()));
    }
    if mag.data().iter().any(|v| *v < T::zero() || v.is_nan()) {
        return invalid("mel projection needs nonnegative magnitudes");
    }
    Ok(matrix::<T>(N_MELS, N_LINEAR, mel_filterbank()).matmul(mag)?)
}

/// Natural log with the `1e-5` floor.
pub fn log_compress<T: Real>(mel: &Tensor<T>) -> Tensor<T> {
    let floor = T::lit(LOG_FLOOR);
    mel.map(|v| v.max(floor).ln())
}

/// Maps log-mel values onto `[-1, 1]`, clamping values outside the fitted range.
pub fn normalize_log<T: Real>(log_mel: &Tensor<T>, stats: &MelStats) -> Tensor<T> {
    let (lo, span) = (T::lit(stats.global_min), T::lit(stats.global_max - stats.global_min));
    let two = T::lit(2.0);
    log_mel.map(|l| (two * (l - lo) / span - T::one()).max(-T::one()).min(T::one()))
}

/// Linear mel `[80, L]` to a normalized spectrogram.
pub fn compress_normalize<T: Real>(mel: &Tensor<T>, stats: &MelStats) -> Result<MelSpectrogram<T>> {
    MelStats::new(stats.global_min, stats.global_max)?;
    MelSpectrogram::new(normalize_log(&log_compress(mel), stats), true)
}

/// Normalized values back to the log-mel domain.
pub fn denormalize_log<T: Real>(x: &Tensor<T>, stats: &MelStats) -> Tensor<T> {
    let (lo, span) = (T::lit(stats.global_min), T::lit(stats.global_max - stats.global_min));
    let half = T::lit(0.5);
    x.map(|v| (v + T::one()) * half * span + lo)
}

/// Inverse of [`compress_normalize`]: normalized values to linear mel.
pub fn denormalize<T: Real>(x: &MelSpectrogram<T>, stats: &MelStats) -> Tensor<T> {
    denormalize_log(x.values(), stats).map(|l| l.exp())
}

/// Log-mel `[80, L]` of a waveform, before normalization.
pub fn log_mel<T: Real>(w: &Waveform<T>) -> Result<Tensor<T>> {
    Ok(log_compress(&mel_project(&stft_magnitude(w)?)?))
}

/// Normalized mel spectrogram of a waveform.
pub fn mel_spectrogram<T: Real>(w: &Waveform<T>, stats: &MelStats) -> Result<MelSpectrogram<T>> {
    MelSpectrogram::new(normalize_log(&log_mel(w)?, stats), true)
}

/// Griffin-Lim with the default iteration count and phase seed 0.
pub fn griffin_lim_invert<T: Real>(x: &MelSpectrogram<T>, stats: &MelStats, iters: usize) -> Result<Waveform<T>> {
    griffin_lim_seeded(x, stats, iters, 0)
}

/// Waveform whose spectrogram approximates `x`, starting from a random
/// phase drawn from `seed`. Returns `L * 160` samples.
pub fn griffin_lim_seeded<T: Real>(
    x: &MelSpectrogram<T>,
    stats: &MelStats,
    iters: usize,
    seed: u64,
) -> Result<Waveform<T>> {
    let mel = denormalize(x, stats);
    let frames = mel.cols();
    let target = matrix::<T>(N_LINEAR, N_MELS, mel_pinv())
        .matmul(&mel)?
        .map(|v| v.max(T::zero()));
    let stft = Stft::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let two_pi = T::lit(std::f64::consts::TAU);
    let mut phase: Vec<Vec<Complex<T>>> = (0..frames)
        .map(|_| {
            (0..N_LINEAR)
                .map(|_| Complex::from_polar(T::one(), two_pi * T::lit(rng.random::<f64>())))
                .collect()
        })
        .collect();
    let with_magnitude = |phase: &[Vec<Complex<T>>]| -> Vec<Vec<Complex<T>>> {
        phase
            .iter()
            .enumerate()
            .map(|(j, row)| {
                row.iter()
                    .enumerate()
                    .map(|(k, p)| p * target.at(k, j))
                    .collect()
            })
            .collect()
    };
    let tiny = T::lit(1e-12);
    for _ in 0..iters {
        let signal = stft.synthesize(&with_magnitude(&phase));
        for (row, spec) in phase.iter_mut().zip(stft.analyze(&signal)) {
            for (p, s) in row.iter_mut().zip(spec) {
                let n = s.norm();
                *p = if n > tiny {
                    s / n
                } else {
                    Complex::new(T::one(), T::zero())
                };
            }
        }
    }
    Waveform::new(stft.synthesize(&with_magnitude(&phase)), SAMPLE_RATE)
}

/// Reads a mono 16 kHz WAV file (16-bit PCM or 32-bit float).
pub fn read_wav<T: Real>(path: &Path) -> Result<Waveform<T>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return invalid(format!("{}: {} channels, expected mono", path.display(), spec.channels));
    }
    let samples: Vec<T> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| T::lit(v as f64 / 32768.0)))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| T::lit(v as f64)))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return invalid(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bits",
                path.display()
            ))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a waveform as 32-bit float WAV.
pub fn write_wav<T: Real>(path: &Path, w: &Waveform<T>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for s in w.samples() {
        writer.write_sample(s.as_f64() as f32)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize, amp: f64) -> Waveform<f64> {
        let sr = SAMPLE_RATE as f64;
        Waveform::new(
            (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin())
                .collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn rejects_wrong_rate_and_empty_input() {
        assert!(Waveform::<f64>::new(vec![0.0; 10], 22_050).is_err());
        let empty = Waveform::<f64>::new(vec![], SAMPLE_RATE).unwrap();
        assert!(stft_magnitude(&empty).is_err());
    }

    #[test]
    fn zero_signal_has_zero_magnitude() {
        let w = Waveform::new(vec![0.0f64; 3000], SAMPLE_RATE).unwrap();
        let mag = stft_magnitude(&w).unwrap();
        assert_eq!(mag.shape(), &[N_LINEAR, 19]);
        assert!(mag.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_second_gives_one_hundred_frames() {
        let mag = stft_magnitude(&tone(440.0, 16_000, 0.5)).unwrap();
        assert_eq!(mag.cols(), 100);
    }

    #[test]
    fn khz_tone_peaks_at_bin_forty_matching_direct_dft() {
        let w = tone(1000.0, 16_000, 0.5);
        let mag = stft_magnitude(&w).unwrap();
        // direct DFT of frame 50, which sits fully inside the signal
        let win = hann::<f64>();
        let start = 50 * HOP - N_FFT / 2;
        let direct: Vec<f64> = (0..N_LINEAR)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..N_FFT {
                    let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / N_FFT as f64;
                    let v = w.samples()[start + n] * win[n];
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect();
        for (k, d) in direct.iter().enumerate() {
            assert!((mag.at(k, 50) - d).abs() < 1e-8 * (1.0 + d));
        }
        // edge frames see a mirrored, phase-flipped copy and may split the peak
        for j in 2..mag.cols() - 2 {
            let argmax = (0..N_LINEAR)
                .max_by(|&a, &b| mag.at(a, j).total_cmp(&mag.at(b, j)))
                .unwrap();
            assert_eq!(argmax, 40, "frame {j}");
        }
    }

    #[test]
    fn filterbank_is_nonnegative_with_unit_peaks() {
        let fb = mel_filterbank();
        assert!(fb.iter().all(|&v| v >= 0.0));
        for m in 0..N_MELS {
            let row = &fb[m * N_LINEAR..(m + 1) * N_LINEAR];
            assert!(row.iter().any(|&v| v > 0.0), "filter {m} is empty");
            assert!(row.iter().all(|&v| v <= 1.0));
        }
    }

    #[test]
    fn low_delta_lands_in_lowest_bands() {
        let mut mag = Tensor::<f64>::zeros(&[N_LINEAR, 1]);
        mag.set(1, 0, 1.0);
        let mel = mel_project(&mag).unwrap();
        let lowest_band_hz = mel_to_hz(hz_to_mel(F_MIN) + 2.0 * (hz_to_mel(F_MAX) - hz_to_mel(F_MIN)) / 81.0);
        assert!(lowest_band_hz > 25.0);
        assert!(mel.at(0, 0) > 0.0);
        assert!((2..N_MELS).all(|m| mel.at(m, 0) == 0.0));
    }

    #[test]
    fn negative_magnitudes_are_rejected() {
        let mut mag = Tensor::<f64>::zeros(&[N_LINEAR, 2]);
        mag.set(3, 1, -1.0);
        assert!(mel_project(&mag).is_err());
        let zero = mel_project(&Tensor::<f64>::zeros(&[N_LINEAR, 2])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_endpoints_and_clip() {
        let stats = MelStats::new(-5.0, 1.0).unwrap();
        let mut mel = Tensor::<f64>::zeros(&[N_MELS, 4]);
        mel.set(0, 0, (-5.0f64).exp());
        mel.set(0, 1, 1.0f64.exp());
        mel.set(0, 2, 1e-6);
        mel.set(0, 3, 1e-5);
        let stats_wide = MelStats::new(LOG_FLOOR.ln(), 1.0).unwrap();
        let x = compress_normalize(&mel, &stats).unwrap();
        assert!((x.values().at(0, 0) + 1.0).abs() < 1e-12);
        assert!((x.values().at(0, 1) - 1.0).abs() < 1e-12);
        let y = compress_normalize(&mel, &stats_wide).unwrap();
        assert_eq!(y.values().at(0, 2), y.values().at(0, 3));
        assert!((y.values().at(0, 3) + 1.0).abs() < 1e-12);
        assert!(MelStats::new(1.0, 1.0).is_err());
    }

    #[test]
    fn denormalize_endpoints() {
        let stats = MelStats::new(-7.0, 2.0).unwrap();
        let lo = MelSpectrogram::<f64>::floor(3).unwrap();
        assert!(denormalize_log(lo.values(), &stats).data().iter().all(|&v| (v + 7.0).abs() < 1e-12));
        let hi = MelSpectrogram::new(Tensor::<f64>::ones(&[N_MELS, 3]), true).unwrap();
        assert!(denormalize_log(hi.values(), &stats).data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn stats_text_round_trip_and_validation() {
        let stats = MelStats::new(-11.512925464970229, 3.1415).unwrap();
        assert_eq!(MelStats::from_text(&stats.to_text()).unwrap(), stats);
        let bad = stats.to_text().replace("hop = 160", "hop = 256");
        assert!(MelStats::from_text(&bad).is_err());
    }

    #[test]
    fn reflect_index_handles_short_signals() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-7, 3), 1);
        assert_eq!(reflect(12, 1), 0);
    }
}

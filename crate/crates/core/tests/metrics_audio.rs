use std::f64::consts::PI;

use inpaint_core::audio::{
    compress_normalize, denormalize, griffin_lim_seeded, log_mel, mel_spectrogram, read_wav, stft_magnitude, write_wav,
    MelStats, Waveform, N_FFT, SAMPLE_RATE,
};
use inpaint_core::metrics::{dtw, f0_extract, logf0_mse, mcd, median};
use inpaint_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tone(freqs: &[f64], seconds: f64) -> Waveform<f64> {
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            freqs.iter().map(|f| 0.3 * (2.0 * PI * f * t).sin()).sum::<f64>()
        })
        .collect();
    Waveform::new(samples, SAMPLE_RATE).unwrap()
}

/// Minimum path cost by recursion over every monotone path.
fn exhaustive_dtw(cost: &[Vec<f64>], i: usize, j: usize) -> f64 {
    let here = cost[i][j];
    if i == 0 && j == 0 {
        return here;
    }
    let mut best = f64::INFINITY;
    if i > 0 {
        best = best.min(exhaustive_dtw(cost, i - 1, j));
    }
    if j > 0 {
        best = best.min(exhaustive_dtw(cost, i, j - 1));
    }
    if i > 0 && j > 0 {
        best = best.min(exhaustive_dtw(cost, i - 1, j - 1));
    }
    here + best
}

#[test]
fn dtw_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n1 in 1..=5 {
        for n2 in 1..=5 {
            for _ in 0..20 {
                let cost: Vec<Vec<f64>> = (0..n1).map(|_| (0..n2).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
                let al = dtw(n1, n2, |i, j| cost[i][j]).unwrap();
                let expect = exhaustive_dtw(&cost, n1 - 1, n2 - 1);
                assert!((al.cost - expect).abs() < 1e-12, "{n1}x{n2}: {} vs {expect}", al.cost);
                let along: f64 = al.path.iter().map(|&(i, j)| cost[i][j]).sum();
                assert!((along - al.cost).abs() < 1e-12);
                assert_eq!(al.path[0], (0, 0));
                assert_eq!(*al.path.last().unwrap(), (n1 - 1, n2 - 1));
                for w in al.path.windows(2) {
                    let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                    assert!(matches!((di, dj), (1, 0) | (0, 1) | (1, 1)));
                }
            }
        }
    }
}

#[test]
fn mcd_of_identical_spectrograms_is_zero() {
    let w = tone(&[300.0, 1700.0], 0.4);
    let lm = log_mel(&w).unwrap();
    let stats = MelStats::fit([&lm]).unwrap();
    let x = mel_spectrogram(&w, &stats).unwrap();
    assert_eq!(mcd(&x, &x, &stats).unwrap(), 0.0);
    let y = mel_spectrogram(&tone(&[500.0, 2300.0], 0.4), &stats).unwrap();
    assert!(mcd(&x, &y, &stats).unwrap() > 0.0);
}

#[test]
fn octave_shift_gives_ln2_squared() {
    let expect = 2f64.ln().powi(2);
    for (a, b) in [(150.0, 300.0), (110.0, 220.0), (200.0, 400.0)] {
        let e = logf0_mse(&tone(&[a], 0.6), &tone(&[b], 0.6)).unwrap().unwrap();
        assert!((e - expect).abs() <= 0.05 * expect, "{a}/{b} Hz: {e}");
    }
    let rich = |f: f64| tone(&[f, 2.0 * f, 3.0 * f], 0.6);
    let e = logf0_mse(&rich(130.0), &rich(260.0)).unwrap().unwrap();
    assert!((e - expect).abs() <= 0.05 * expect, "{e}");
}

#[test]
fn pitch_of_tones_and_silence() {
    let c = f0_extract(&tone(&[220.0], 0.5));
    let voiced: Vec<f64> = c.f0.iter().copied().filter(|f| *f > 0.0).collect();
    assert!(voiced.len() >= c.f0.len() - 2);
    assert!((median(&voiced).unwrap() - 220.0).abs() < 2.0);
    let silent = Waveform::new(vec![0.0f64; 8000], SAMPLE_RATE).unwrap();
    assert!(f0_extract(&silent).f0.iter().all(|f| *f == 0.0));
    assert_eq!(logf0_mse(&silent, &tone(&[220.0], 0.5)).unwrap(), None);
}

/// Frequency of the strongest STFT bin, averaged over interior frames and
/// refined by a parabola.
fn dominant_frequency(w: &Waveform<f64>) -> f64 {
    let mag = stft_magnitude(w).unwrap();
    let frames = mag.cols();
    let mut spectrum = vec![0.0; mag.rows()];
    for j in 2..frames - 2 {
        for (k, s) in spectrum.iter_mut().enumerate() {
            *s += mag.at(k, j);
        }
    }
    let k = (1..spectrum.len() - 1).max_by(|&a, &b| spectrum[a].total_cmp(&spectrum[b])).unwrap();
    let (y0, y1, y2) = (spectrum[k - 1], spectrum[k], spectrum[k + 1]);
    let shift = 0.5 * (y0 - y2) / (y0 - 2.0 * y1 + y2);
    (k as f64 + shift) * SAMPLE_RATE as f64 / N_FFT as f64
}

#[test]
fn griffin_lim_keeps_the_tone_frequency() {
    for f in [440.0, 1000.0, 2730.0] {
        let w = tone(&[f], 0.5);
        let lm = log_mel(&w).unwrap();
        let stats = MelStats::fit([&lm]).unwrap();
        let x = mel_spectrogram(&w, &stats).unwrap();
        let back = griffin_lim_seeded(&x, &stats, 60, 1).unwrap();
        assert_eq!(back.len(), x.frames() * 160);
        let got = dominant_frequency(&back);
        assert!((got - f).abs() <= 25.0, "{f} Hz came back as {got} Hz");
    }
}

#[test]
fn wav_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.wav");
    let w = tone(&[300.0], 0.1);
    write_wav(&p, &w).unwrap();
    let r: Waveform<f64> = read_wav(&p).unwrap();
    assert_eq!(r.len(), w.len());
    for (a, b) in r.samples().iter().zip(w.samples()) {
        assert!((a - b).abs() < 1e-4);
    }
}

proptest! {
    #[test]
    fn normalization_round_trips(seed in any::<u64>(), lo in -11.5f64..-5.0, span in 1.0f64..15.0) {
        let stats = MelStats::new(lo, lo + span).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mel = Tensor::from_fn(&[80, 6], |_| rng.random_range(lo..lo + span).exp().max(1e-5));
        let back = denormalize(&compress_normalize(&mel, &stats).unwrap(), &stats);
        for (a, b) in mel.data().iter().zip(back.data()) {
            if a.ln() >= lo {
                prop_assert!((a - b).abs() <= 1e-6 * a, "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn frame_count_is_hop_ceiling(n in 1usize..10_000) {
        let w = Waveform::new(vec![0.01f64; n], SAMPLE_RATE).unwrap();
        let expect = (n as f64 / 160.0).ceil() as usize;
        prop_assert_eq!(w.frame_count(), expect);
        prop_assert_eq!(log_mel(&w).unwrap().cols(), expect);
    }
}

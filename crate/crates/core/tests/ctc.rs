use inpaint_core::guidance::{ctc_loss, ctc_loss_and_grad, required_frames, BLANK};
use inpaint_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Total probability of `y` by summing every path of length `l` that
/// collapses to it.
fn brute_force_prob(probs: &[Vec<f64>], y: &[usize]) -> f64 {
    let l = probs.len();
    let v = probs[0].len();
    let mut total = 0.0;
    let mut path = vec![0usize; l];
    for code in 0..v.pow(l as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % v;
            c /= v;
        }
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != BLANK {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == y {
            total += path.iter().enumerate().map(|(i, &s)| probs[i][s]).product::<f64>();
        }
    }
    total
}

fn random_probs(l: usize, v: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..l)
        .map(|_| {
            let raw: Vec<f64> = (0..v).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|p| p / s).collect()
        })
        .collect()
}

fn log_tensor(probs: &[Vec<f64>]) -> Tensor<f64> {
    let v = probs[0].len();
    Tensor::from_vec(&[probs.len(), v], probs.iter().flatten().map(|p| p.ln()).collect()).unwrap()
}

/// Every label sequence over `1..v` of length at most `max_len`.
fn all_targets(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for y in &frontier {
            for s in 1..v {
                let mut z: Vec<usize> = y.clone();
                z.push(s);
                next.push(z);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn forward_algorithm_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for v in 2..=3 {
        for l in 1..=6 {
            for y in all_targets(v, 3) {
                let probs = random_probs(l, v, &mut rng);
                let loss = ctc_loss(&log_tensor(&probs), &y, BLANK).unwrap();
                let p = brute_force_prob(&probs, &y);
                if required_frames(&y) > l {
                    assert_eq!(p, 0.0);
                    assert!(loss.is_infinite() && loss > 0.0, "{y:?} in {l} frames");
                    continue;
                }
                let expect = -p.ln();
                assert!(
                    (loss - expect).abs() <= 1e-8 * expect.abs().max(1e-300),
                    "v={v} l={l} y={y:?}: {loss} vs {expect}"
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 60, "{checked}");
}

#[test]
fn uniform_two_frame_cases() {
    let probs = vec![vec![0.5, 0.5]; 2];
    let lp = log_tensor(&probs);
    assert!((ctc_loss(&lp, &[1], BLANK).unwrap() - (-(0.75f64).ln())).abs() < 1e-12);
    assert!((ctc_loss(&lp, &[], BLANK).unwrap() - (-(0.25f64).ln())).abs() < 1e-12);
    assert_eq!(required_frames(&[1, 1]), 3);
    let out = ctc_loss_and_grad(&lp, &[1, 1], BLANK).unwrap();
    assert!(out.loss.is_infinite());
    assert!(out.grad.is_none());
}

#[test]
fn sharpening_raises_log_probability() {
    let flat = log_tensor(&vec![vec![0.5, 0.5]; 2]);
    let sharp_probs = vec![vec![0.1, 0.9]; 2];
    let sharp = log_tensor(&sharp_probs);
    let lf = -ctc_loss(&flat, &[1], BLANK).unwrap();
    let ls = -ctc_loss(&sharp, &[1], BLANK).unwrap();
    // (a,a) + (a,-) + (-,a) = 0.81 + 0.09 + 0.09
    assert!((ls - 0.99f64.ln()).abs() < 1e-12);
    assert!((brute_force_prob(&sharp_probs, &[1]) - 0.99).abs() < 1e-12);
    assert!(ls > lf);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let probs = random_probs(5, 3, &mut rng);
    let lp = log_tensor(&probs);
    let y = [1, 2, 2];
    let out = ctc_loss_and_grad(&lp, &y, BLANK).unwrap();
    let grad = out.grad.unwrap();
    let h = 1e-6;
    for i in 0..lp.len() {
        let mut up = lp.clone();
        up.data_mut()[i] += h;
        let mut down = lp.clone();
        down.data_mut()[i] -= h;
        let fd = (ctc_loss(&up, &y, BLANK).unwrap() - ctc_loss(&down, &y, BLANK).unwrap()) / (2.0 * h);
        assert!((fd - grad.data()[i]).abs() < 1e-6, "entry {i}: {fd} vs {}", grad.data()[i]);
    }
}

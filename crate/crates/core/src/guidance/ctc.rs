//! CTC loss by the forward-backward recursion in log space.

use crate::{invalid, Real, Result, Tensor};

/// Frames needed to emit `y`: one per label plus a blank between repeats.
pub fn required_frames(y: &[usize]) -> usize {
    y.len() + y.windows(2).filter(|w| w[0] == w[1]).count()
}

fn lse<T: Real>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn check_inputs<T: Real>(log_probs: &Tensor<T>, y: &[usize], blank: usize) -> Result<(usize, usize)> {
    if log_probs.ndim() != 2 || log_probs.rows() == 0 {
        return invalid(format!("log-probs must be [frames >= 1, V], got {:?}", log_probs.shape()));
    }
    let v = log_probs.cols();
    if blank >= v || y.iter().any(|&k| k >= v || k == blank) {
        return invalid("target contains the blank or an id outside the vocabulary");
    }
    Ok((log_probs.rows(), v))
}

/// Loss and its gradient with respect to the log-probabilities.
#[derive(Clone, Debug)]
pub struct CtcOutput<T> {
    /// `-ln P(y | x)`; infinite when `y` cannot be aligned.
    pub loss: T,
    /// `None` when the loss is infinite.
    pub grad: Option<Tensor<T>>,
}

/// `-ln` of the total probability of all alignments of `y`.
pub fn ctc_loss<T: Real>(log_probs: &Tensor<T>, y: &[usize], blank: usize) -> Result<T> {
    Ok(ctc_loss_and_grad(log_probs, y, blank)?.loss)
}

/// CTC loss with the gradient `d loss / d log_probs[t, k]`, which is minus
/// the expected number of alignments visiting label `k` at frame `t`.
pub fn ctc_loss_and_grad<T: Real>(log_probs: &Tensor<T>, y: &[usize], blank: usize) -> Result<CtcOutput<T>> {
    let (frames, v) = check_inputs(log_probs, y, blank)?;
    if required_frames(y) > frames {
        return Ok(CtcOutput {
            loss: T::infinity(),
            grad: None,
        });
    }
    let ninf = T::neg_infinity();
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(y.iter().flat_map(|&k| [k, blank]))
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs.data()[t * v + k];
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = lse(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, ext[s]) };
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = if s_len > 1 {
        lse(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p == ninf {
        return Ok(CtcOutput {
            loss: T::infinity(),
            grad: None,
        });
    }

    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = lp(frames - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(frames - 1, ext[s_len - 2]);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = lse(acc, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = lse(acc, next[s + 2]);
            }
            beta[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, ext[s]) };
        }
    }

    let mut occupancy = vec![ninf; frames * v];
    for t in 0..frames {
        for s in 0..s_len {
            let a = alpha[t * s_len + s] + beta[t * s_len + s];
            let slot = &mut occupancy[t * v + ext[s]];
            *slot = lse(*slot, a);
        }
    }
    let grad = Tensor::from_fn(&[frames, v], |i| {
        let o = occupancy[i];
        if o == ninf {
            T::zero()
        } else {
            -(o - log_probs.data()[i] - log_p).exp()
        }
    });
    Ok(CtcOutput {
        loss: -log_p,
        grad: Some(grad),
    })
}

/// Best-path decoding: per-frame argmax, repeats merged, blanks dropped.
pub fn greedy_decode<T: Real>(log_probs: &Tensor<T>, blank: usize) -> Vec<usize> {
    let v = log_probs.cols();
    let mut out = Vec::new();
    let mut prev = None;
    for row in log_probs.data().chunks(v) {
        let best = (0..v).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal));
        if best != prev {
            if let Some(k) = best.filter(|&k| k != blank) {
                out.push(k);
            }
        }
        prev = best;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(frames: usize, v: usize) -> Tensor<f64> {
        Tensor::full(&[frames, v], (1.0 / v as f64).ln())
    }

    #[test]
    fn two_frame_examples() {
        let lp = uniform(2, 2);
        assert!((ctc_loss(&lp, &[1], 0).unwrap() + 0.75f64.ln()).abs() < 1e-12);
        assert!((ctc_loss(&lp, &[], 0).unwrap() + 0.25f64.ln()).abs() < 1e-12);
        assert_eq!(ctc_loss(&lp, &[1, 1], 0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn sharpening_raises_probability() {
        let sharp = Tensor::from_vec(&[2, 2], vec![0.1f64.ln(), 0.9f64.ln(), 0.1f64.ln(), 0.9f64.ln()]).unwrap();
        let p = (-ctc_loss(&sharp, &[1], 0).unwrap()).exp();
        assert!((p - 0.99).abs() < 1e-12);
    }

    #[test]
    fn alignment_length() {
        assert_eq!(required_frames(&[1, 1]), 3);
        assert_eq!(required_frames(&[1, 2, 2, 2]), 6);
        assert_eq!(required_frames(&[]), 0);
    }

    #[test]
    fn decoding_merges_repeats() {
        let rows = [[0.0, -5.0, -5.0], [-5.0, 0.0, -5.0], [-5.0, 0.0, -5.0], [0.0, -5.0, -5.0], [-5.0, 0.0, -5.0], [-5.0, -5.0, 0.0]];
        let lp = Tensor::from_vec(&[6, 3], rows.iter().flatten().copied().collect()).unwrap();
        assert_eq!(greedy_decode(&lp, 0), vec![1, 1, 2]);
    }

    #[test]
    fn rejects_blank_targets() {
        assert!(ctc_loss(&uniform(3, 3), &[0], 0).is_err());
        assert!(ctc_loss(&uniform(3, 3), &[3], 0).is_err());
    }
}

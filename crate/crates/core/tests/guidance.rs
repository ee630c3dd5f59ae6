use inpaint_core::autograd::{Graph, ParamStore, Var};
use inpaint_core::guidance::{
    classifier_forward, classifier_logprob, gamma, guidance_gradient, guided_noise, Conformer, ConformerConfig,
    CtcClassifier, TokenSequence,
};
use inpaint_core::{randn, Result, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_classifier(stride: usize, seed: u64) -> Conformer<f64> {
    let cfg = ConformerConfig {
        dim: 8,
        heads: 2,
        blocks: 1,
        ff_mult: 2,
        conv_kernel: 3,
        stride,
        vocab_size: 3,
    };
    Conformer::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn gradient_matches_central_differences() {
    let clf = toy_classifier(1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Tensor<f64> = randn(&[80, 4], &mut rng).scale(0.5);
    let y = TokenSequence::new(vec![1, 2], 3).unwrap();
    let t = 7;
    let g = guidance_gradient(&clf, &x, &y, t).unwrap();
    assert!(!g.skipped);
    assert_eq!(g.grad.shape(), x.shape());
    let h = 1e-3;
    let mut checked = 0;
    for i in 0..x.len() {
        let a = g.grad.data()[i];
        if a.abs() <= 1e-6 {
            continue;
        }
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut down = x.clone();
        down.data_mut()[i] -= h;
        let fd = (classifier_logprob(&clf, &up, &y, t).unwrap() - classifier_logprob(&clf, &down, &y, t).unwrap())
            / (2.0 * h);
        assert!((fd - a).abs() <= 1e-3 * a.abs(), "entry {i}: analytic {a} vs fd {fd}");
        checked += 1;
    }
    assert!(checked > 100, "only {checked} entries above threshold");
}

struct ConstantClassifier {
    store: ParamStore<f64>,
}

impl CtcClassifier<f64> for ConstantClassifier {
    fn params(&self) -> &ParamStore<f64> {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }
    fn vocab_size(&self) -> usize {
        2
    }
    fn output_frames(&self, frames: usize) -> usize {
        frames
    }
    fn forward(&self, g: &mut Graph<'_, f64>, x: Var, _t: usize) -> Result<Var> {
        let frames = g.shape(x)[1];
        Ok(g.constant(Tensor::full(&[frames, 2], 0.5f64.ln())))
    }
}

#[test]
fn input_independent_classifier_has_zero_gradient() {
    let clf = ConstantClassifier { store: ParamStore::new() };
    let x = Tensor::full(&[80, 2], 0.3);
    let y = TokenSequence::new(vec![1], 2).unwrap();
    let g = guidance_gradient(&clf, &x, &y, 0).unwrap();
    assert_eq!(g.grad, Tensor::zeros(&[80, 2]));
    assert!((g.log_prob - 0.75f64.ln()).abs() < 1e-12);
    let (eps_hat, applied) = guided_noise(&Tensor::full(&[80, 2], 1.0), &g.grad, 0.3, 1.0).unwrap();
    assert!(!applied);
    assert_eq!(eps_hat, Tensor::full(&[80, 2], 1.0));
}

#[test]
fn unalignable_target_is_skipped() {
    let clf = toy_classifier(2, 1);
    let x = Tensor::zeros(&[80, 4]);
    let y = TokenSequence::new(vec![1, 1], 3).unwrap();
    let g = guidance_gradient(&clf, &x, &y, 0).unwrap();
    assert!(g.skipped);
    assert!(g.log_prob.is_infinite());
    assert_eq!(g.grad.max_abs(), 0.0);
}

#[test]
fn output_length_follows_stride() {
    let x: Tensor<f64> = Tensor::zeros(&[80, 100]);
    assert_eq!(classifier_forward(&toy_classifier(2, 0), &x, 3).unwrap().shape(), &[50, 3]);
    assert_eq!(classifier_forward(&toy_classifier(1, 0), &x, 3).unwrap().shape(), &[100, 3]);
}

#[test]
fn step_embedding_changes_output() {
    let clf = toy_classifier(1, 8);
    let x: Tensor<f64> = randn(&[80, 6], &mut ChaCha8Rng::seed_from_u64(1));
    let a = classifier_forward(&clf, &x, 2).unwrap();
    let b = classifier_forward(&clf, &x, 40).unwrap();
    assert!(a.sub(&b).unwrap().max_abs() > 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rows_are_log_normalized(seed in any::<u64>(), frames in 1usize..12, scale in 0.1f64..5.0, t in 0usize..50) {
        let clf = toy_classifier(1, seed % 4);
        let x: Tensor<f64> = randn(&[80, frames], &mut ChaCha8Rng::seed_from_u64(seed)).scale(scale);
        let lp = classifier_forward(&clf, &x, t).unwrap();
        for r in 0..lp.rows() {
            let s: f64 = (0..lp.cols()).map(|c| lp.at(r, c).exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn shift_magnitude_is_fixed_and_scale_free(
        seed in any::<u64>(),
        w2 in 0.0f64..4.0,
        sigma in 0.01f64..1.0,
        c in prop::sample::select(vec![1e-3f64, 0.5, 1e3]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Tensor<f64> = randn(&[80, 5], &mut rng);
        let grad: Tensor<f64> = randn(&[80, 5], &mut rng);
        let (hat, applied) = guided_noise(&eps, &grad, sigma, w2).unwrap();
        prop_assert!(applied);
        let shift = hat.sub(&eps).unwrap().norm();
        let expect = w2 * eps.norm().sqrt();
        prop_assert!((shift - expect).abs() <= 1e-6 * expect.max(1e-12));
        let g1 = gamma(&eps, &grad, sigma).unwrap();
        let gc = gamma(&eps, &grad.scale(c), sigma).unwrap();
        let a = grad.scale(g1);
        let b = grad.scale(c).scale(gc);
        prop_assert!(a.sub(&b).unwrap().max_abs() <= 1e-9 * a.max_abs());
    }
}

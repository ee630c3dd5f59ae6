use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Compares backward() against central differences for every input entry.
fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Graph<'static, f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
        let o = f(&mut g, &vars);
        g.value(o).data()[0]
    };
    let h = 1e-5;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for k in 0..t.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[k];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                "input {i} entry {k}: analytic {a} vs fd {fd}"
            );
        }
    }
}

/// Weighted sum so every output entry matters with a distinct weight.
fn probe(g: &mut Graph<'static, f64>, v: Var) -> Var {
    let shape = g.shape(v).to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |k| ((k as f64) * 0.37).sin() + 0.5));
    let p = g.mul(v, w).unwrap();
    g.sum(p)
}

#[test]
fn elementwise_and_unary() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    check(vec![a, b], |g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let d = g.sub(s, v[1]).unwrap();
        let m = g.mul(d, v[1]).unwrap();
        let x = g.silu(m);
        let y = g.gelu(x);
        let z = g.tanh(y);
        let q = g.sigmoid(z);
        let e = g.exp(q);
        let sq = g.square(e);
        let sc = g.scale(sq, 0.3);
        let sh = g.add_scalar(sc, 2.0);
        probe(g, sh)
    });
}

#[test]
fn matmul_transpose_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    check(vec![a, b], |g, v| {
        let m = g.matmul(v[0], v[1]).unwrap();
        let t = g.transpose(m).unwrap();
        let r = g.reshape(t, &[6]).unwrap();
        probe(g, r)
    });
}

#[test]
fn broadcasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let r = rand_tensor(&mut rng, &[4]);
    let c = rand_tensor(&mut rng, &[3]);
    check(vec![a, r, c], |g, v| {
        let x = g.add_row(v[0], v[1]).unwrap();
        let x = g.mul_row(x, v[1]).unwrap();
        let x = g.add_col(x, v[2]).unwrap();
        let x = g.mul_col(x, v[2]).unwrap();
        probe(g, x)
    });
}

#[test]
fn norms_and_softmaxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[3, 5]);
    check(vec![a.clone()], |g, v| {
        let x = g.layer_norm(v[0], 1e-5);
        probe(g, x)
    });
    check(vec![a.clone()], |g, v| {
        let x = g.softmax(v[0]);
        probe(g, x)
    });
    check(vec![a], |g, v| {
        let x = g.log_softmax(v[0]);
        let m = g.mean(x);
        let p = probe(g, x);
        g.add(m, p).unwrap()
    });
}

#[test]
fn slicing_and_concatenation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[3, 5]);
    let b = rand_tensor(&mut rng, &[2, 5]);
    check(vec![a, b], |g, v| {
        let s = g.slice_cols(v[0], 1, 4).unwrap();
        let t = g.slice_cols(v[0], 0, 2).unwrap();
        let c = g.concat_cols(&[s, t]).unwrap();
        let r = g.concat_rows(&[v[0], v[1]]).unwrap();
        let rs = g.slice_rows(r, 2, 5).unwrap();
        let p1 = probe(g, c);
        let p2 = probe(g, rs);
        g.add(p1, p2).unwrap()
    });
}

#[test]
fn conv1d_grouped_strided() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[4, 9]);
    let w = rand_tensor(&mut rng, &[6, 2, 3]);
    let b = rand_tensor(&mut rng, &[6]);
    check(vec![x, w, b], |g, v| {
        let y = g.conv1d(v[0], v[1], Some(v[2]), 2, 1, 2).unwrap();
        probe(g, y)
    });
}

#[test]
fn conv1d_output_lengths() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 10]));
    let w = g.constant(Tensor::zeros(&[1, 1, 3]));
    let y = g.conv1d(x, w, None, 1, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 10]);
    let y = g.conv1d(x, w, None, 2, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 5]);
}

#[test]
fn conv_transpose1d_grad_and_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3]);
    let b = rand_tensor(&mut rng, &[2]);
    check(vec![x, w, b], |g, v| {
        let y = g.conv_transpose1d(v[0], v[1], Some(v[2]), 2).unwrap();
        assert_eq!(g.shape(y), &[2, 11]);
        probe(g, y)
    });
}

#[test]
fn conv2d_both_strides() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[2, 6, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    check(vec![x.clone(), w.clone(), b.clone()], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
        assert_eq!(g.shape(y), &[3, 6, 5]);
        probe(g, y)
    });
    check(vec![x, w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
        assert_eq!(g.shape(y), &[3, 3, 3]);
        probe(g, y)
    });
}

#[test]
fn upsample_and_resize() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    check(vec![x], |g, v| {
        let u = g.upsample2x(v[0]).unwrap();
        let p = g.resize_last(u, 10).unwrap();
        let c = g.resize_last(p, 5).unwrap();
        probe(g, c)
    });
}

#[test]
fn custom_scalar_scales_supplied_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    let c = g
        .custom_scalar(x, 5.0, Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap())
        .unwrap();
    let s = g.scale(c, 3.0);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.5, -3.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::ones(&[2]));
    let b = g.variable(Tensor::ones(&[2]));
    let m = g.mul(a, b).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(a).is_none());
    assert!(grads.get(b).is_some());
}

#[test]
fn params_are_shared_within_a_graph() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::full(&[2], 3.0)).unwrap();
    let mut g = Graph::with_params(&store, true);
    let a = g.param(id);
    let b = g.param(id);
    assert_eq!(a, b);
    let m = g.mul(a, b).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    let pg = g.param_grads(&grads);
    assert_eq!(pg.get(id).unwrap().data(), &[6.0, 6.0]);
}

#[test]
fn frozen_params_have_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::full(&[2], 3.0)).unwrap();
    let mut g = Graph::with_params(&store, false);
    let w = g.param(id);
    let x = g.variable(Tensor::ones(&[2]));
    let m = g.mul(w, x).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert!(g.param_grads(&grads).get(id).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
}

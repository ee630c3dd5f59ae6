//! Adam.

use crate::{ParamGrads, ParamStore, Result, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Adam optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(config: AdamConfig, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Self {
        Self { config, step, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Applies one update. Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<T> {
        let norm = grads.norm();
        let clip = match self.config.clip_norm {
            Some(c) if norm.as_f64() > c => T::lit(c) / norm,
            _ => T::one(),
        };
        self.step += 1;
        let (b1, b2) = (T::lit(self.config.beta1), T::lit(self.config.beta2));
        let bc1 = T::one() - b1.powi(self.step as i32);
        let bc2 = T::one() - b2.powi(self.step as i32);
        let lr = T::lit(self.config.lr);
        let eps = T::lit(self.config.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else {
                continue;
            };
            let i = id.index();
            let p = store.get_mut(id);
            p.check_same_shape(g)?;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k] * clip;
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap()).unwrap();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::with_params(&store, true);
                let x = g.param(id);
                let sq = g.square(x);
                let s = g.sum(sq);
                let gr = g.backward(s).unwrap();
                g.param_grads(&gr)
            };
            opt.step(&mut store, &grads).unwrap();
        }
        assert!(store.get(id).max_abs() < 1e-2);
    }

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let grads = {
            let mut gr = Graph::with_params(&store, true);
            let x = gr.param(id);
            let s = gr.sum(x);
            let b = gr.backward(s).unwrap();
            gr.param_grads(&b)
        };
        opt.step(&mut store, &grads).unwrap();
        // bias-corrected first step is lr * sign(g)
        for &w in store.get(id).data() {
            assert!((w - (1.0 - 2e-4)).abs() < 1e-9);
        }
    }
}

use std::collections::BTreeMap;

use crate::error::NumericsError;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1.6e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moment accumulators, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |id| Tensor::zeros(store.get(id).shape());
        Self { config, step: 0, m: store.ids().map(zeros).collect(), v: store.ids().map(zeros).collect() }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// One Adam update. Parameters without an entry in `grads`, and frozen
/// parameters, are left alone. All gradients are validated before anything
/// is written, so a NaN leaves params and state untouched.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<ParamId, Tensor<T>>,
    state: &mut OptimState<T>,
) -> Result<(), NumericsError> {
    for (&id, g) in grads {
        if g.shape() != store.get(id).shape() {
            return Err(NumericsError::ParamShape {
                name: store.name(id).to_string(),
                expected: store.get(id).shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(NumericsError::NanGradient { id: id.0, name: store.name(id).to_string() });
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
    let (ob1, ob2) = (T::one() - b1, T::one() - b2);
    let step_size = T::from_f64_lossy(c.lr / bc1);
    let sqrt_bc2 = T::from_f64_lossy(bc2.sqrt());
    let eps = T::from_f64_lossy(c.eps);
    for (&id, g) in grads {
        if store.is_frozen(id) {
            continue;
        }
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let p = store.get_mut(id).data_mut();
        for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *mi = b1 * *mi + ob1 * gi;
            *vi = b2 * *vi + ob2 * gi * gi;
            let denom = vi.sqrt() / sqrt_bc2 + eps;
            *pi = *pi - step_size * *mi / denom;
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut BTreeMap<ParamId, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let f = v.to_f64_lossy();
            f * f
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn store_with(x: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::from_f64(&[x.len()], x).unwrap());
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = store_with(&[1.0, -2.0]);
        let mut st = OptimState::new(&s, AdamConfig { lr: 0.1, ..Default::default() });
        let grads = BTreeMap::from([(id, Tensor::zeros(&[2]))]);
        for _ in 0..5 {
            adam_step(&mut s, &grads, &mut st).unwrap();
        }
        assert_eq!(s.get(id).data(), &[1.0, -2.0]);
        assert!(st.m[0].data().iter().all(|v| *v == 0.0));
        assert_eq!(st.step, 5);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let (mut s, id) = store_with(&[0.0]);
        let mut st = OptimState::new(&s, AdamConfig { lr: 0.1, ..Default::default() });
        adam_step(&mut s, &BTreeMap::from([(id, Tensor::from_f64(&[1], &[1.0]).unwrap())]), &mut st).unwrap();
        let (m0, v0) = (st.m[0].data()[0], st.v[0].data()[0]);
        let zero = BTreeMap::from([(id, Tensor::zeros(&[1]))]);
        adam_step(&mut s, &zero, &mut st).unwrap();
        assert!(st.m[0].data()[0].abs() < m0.abs());
        assert!(st.v[0].data()[0] < v0);
    }

    #[test]
    fn constant_gradient_steps_at_lr_times_sign() {
        let (mut s, id) = store_with(&[0.0, 0.0]);
        let lr = 1e-3;
        let mut st = OptimState::new(&s, AdamConfig { lr, ..Default::default() });
        let grads = BTreeMap::from([(id, Tensor::from_f64(&[2], &[0.37, -5.0]).unwrap())]);
        let mut prev = s.get(id).clone();
        for _ in 0..500 {
            adam_step(&mut s, &grads, &mut st).unwrap();
            let cur = s.get(id).clone();
            let d0 = cur.data()[0] - prev.data()[0];
            let d1 = cur.data()[1] - prev.data()[1];
            assert!((d0 + lr).abs() < 1e-6 * lr.max(1.0) + 1e-8);
            assert!((d1 - lr).abs() < 1e-6 * lr.max(1.0) + 1e-8);
            prev = cur;
        }
    }

    #[test]
    fn nan_gradient_is_reported_with_name() {
        let (mut s, id) = store_with(&[1.0]);
        let mut st = OptimState::new(&s, AdamConfig::default());
        let grads = BTreeMap::from([(id, Tensor::from_f64(&[1], &[f64::NAN]).unwrap())]);
        let err = adam_step(&mut s, &grads, &mut st).unwrap_err();
        assert!(matches!(err, NumericsError::NanGradient { ref name, .. } if name == "x"));
        assert_eq!(st.step, 0);
        assert_eq!(s.get(id).data(), &[1.0]);
    }

    #[test]
    fn quadratic_bowl_norm_tail_is_monotone() {
        let (mut s, id) = store_with(&[1.5, -0.8, 0.3, 2.0]);
        let mut st = OptimState::new(&s, AdamConfig { lr: 1e-2, ..Default::default() });
        let mut norms = Vec::new();
        for _ in 0..200 {
            let mut g = Graph::new();
            let x = g.param(&s, id);
            let sq = g.mul(x, x);
            let loss = g.sum(sq);
            let grads = g.backward(loss).unwrap().into_params();
            adam_step(&mut s, &grads, &mut st).unwrap();
            norms.push(s.get(id).data().iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        // warm-up: first 10 steps
        for w in norms[10..].windows(2) {
            assert!(w[1] < w[0], "norm increased: {} -> {}", w[0], w[1]);
        }
        assert!(norms[199] < norms[0]);
    }
}

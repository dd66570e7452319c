//! First-order optimizers and learning-rate schedules.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with optional decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: HashMap<ParamId, Vec<f64>>,
    v: HashMap<ParamId, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Tensor>) -> Result<()> {
        check_finite(store, grads)?;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut ids: Vec<_> = grads.keys().copied().collect();
        ids.sort();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let g = grads[&id].data();
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            let p = store.tensor_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Tensor>) -> Result<()> {
        check_finite(store, grads)?;
        let mut ids: Vec<_> = grads.keys().copied().collect();
        ids.sort();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let g = grads[&id].data();
            let vel = self.velocity.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            let p = store.tensor_mut(id).data_mut();
            for i in 0..g.len() {
                vel[i] = self.momentum * vel[i] + g[i];
                p[i] -= self.lr * vel[i];
            }
        }
        Ok(())
    }
}

fn check_finite(store: &ParamStore, grads: &HashMap<ParamId, Tensor>) -> Result<()> {
    for (id, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", store.get(*id).name)));
        }
    }
    Ok(())
}

/// Cosine annealing from `base` to `floor` over `total` steps.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Sums gradient maps in the given order. Used to reduce per-sample graphs
/// deterministically.
pub fn sum_grads<I>(parts: I) -> HashMap<ParamId, Tensor>
where
    I: IntoIterator<Item = HashMap<ParamId, Tensor>>,
{
    let mut acc: HashMap<ParamId, Tensor> = HashMap::new();
    for part in parts {
        let mut ids: Vec<_> = part.keys().copied().collect();
        ids.sort();
        let mut part = part;
        for id in ids {
            let g = part.remove(&id).unwrap();
            match acc.get_mut(&id) {
                Some(a) => a.add_assign(&g),
                None => {
                    acc.insert(id, g);
                }
            }
        }
    }
    acc
}

/// Multiplies every gradient by `s` in place.
pub fn scale_grads(grads: &mut HashMap<ParamId, Tensor>, s: f64) {
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_store() -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::new(&[1, 2], vec![3.0, -2.0]).unwrap());
        (s, id)
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let (mut s, id) = quadratic_store();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = s.tensor(id).map(|v| 2.0 * v);
            opt.step(&mut s, &HashMap::from([(id, g)])).unwrap();
        }
        assert!(s.tensor(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn sgd_momentum_minimizes_quadratic() {
        let (mut s, id) = quadratic_store();
        let mut opt = Sgd::new(0.05, 0.9);
        for _ in 0..300 {
            let g = s.tensor(id).map(|v| 2.0 * v);
            opt.step(&mut s, &HashMap::from([(id, g)])).unwrap();
        }
        assert!(s.tensor(id).data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn frozen_params_do_not_move() {
        let (mut s, id) = quadratic_store();
        s.set_trainable(id, false);
        let before = s.tensor(id).clone();
        Adam::new(0.1)
            .step(&mut s, &HashMap::from([(id, before.map(|_| 1.0))]))
            .unwrap();
        assert!(s.tensor(id).bit_eq(&before));
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let (mut s, id) = quadratic_store();
        let g = Tensor::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        let err = Sgd::new(0.1, 0.9).step(&mut s, &HashMap::from([(id, g)]));
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.0, 0.0, 0, 11), 1.0);
        assert!((cosine_lr(1.0, 0.0, 5, 11) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 0.1, 10, 11) - 0.1 < 1e-12);
    }
}

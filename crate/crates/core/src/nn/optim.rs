use std::collections::BTreeMap;

use super::params::{ParamId, ParamStore};
use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;

fn check_grad<S: Scalar>(store: &ParamStore<S>, id: ParamId, grad: &[S]) -> Result<()> {
    if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite gradient {} at element {pos} of parameter `{}`",
            grad[pos],
            store.name(id)
        )));
    }
    Ok(())
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// velocity: `v <- momentum*v + grad + wd*param`, `param <- param - lr*v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum<S> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<ParamId, Vec<S>>,
}

impl<S: Scalar> SgdMomentum<S> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[S]> {
        self.velocity.get(&id).map(Vec::as_slice)
    }

    /// Updates `ids` in place using their accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore<S>, ids: &[ParamId], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(config_err!("learning rate must be > 0, got {lr}"));
        }
        let (mu, wd, lr) = (S::lit(self.momentum), S::lit(self.weight_decay), S::lit(lr));
        for &id in ids {
            let grad = store.get(id).grad().unwrap_or(&[]).to_vec();
            check_grad(store, id, &grad)?;
            let len = store.get(id).len();
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| vec![S::zero(); len]);
            let t = store.get_mut(id);
            let (data, _) = t.data_and_grad_mut();
            for ((p, vi), &g) in data.iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vi = mu * *vi + g + wd * *p;
                *p -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Bias-corrected Adam with decoupled weight decay:
/// `param <- param - lr*(mhat/(sqrt(vhat)+eps) + wd*param)`.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    first: BTreeMap<ParamId, Vec<S>>,
    second: BTreeMap<ParamId, Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, ids: &[ParamId], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(config_err!("learning rate must be > 0, got {lr}"));
        }
        let grads: Vec<Vec<S>> = ids
            .iter()
            .map(|&id| store.get(id).grad().unwrap_or(&[]).to_vec())
            .collect();
        for (&id, g) in ids.iter().zip(&grads) {
            check_grad(store, id, g)?;
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = S::lit(1.0 - b1.powi(t));
        let bc2 = S::lit(1.0 - b2.powi(t));
        let (b1s, b2s) = (S::lit(b1), S::lit(b2));
        let (eps, wd, lr) = (S::lit(self.epsilon), S::lit(self.weight_decay), S::lit(lr));
        for (&id, grad) in ids.iter().zip(&grads) {
            let len = store.get(id).len();
            let m = self.first.entry(id).or_insert_with(|| vec![S::zero(); len]);
            let v = self.second.entry(id).or_insert_with(|| vec![S::zero(); len]);
            let tensor = store.get_mut(id);
            let (data, _) = tensor.data_and_grad_mut();
            for i in 0..len {
                let g = grad[i];
                m[i] = b1s * m[i] + (S::one() - b1s) * g;
                v[i] = b2s * v[i] + (S::one() - b2s) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * data[i]);
            }
        }
        Ok(())
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * epoch / total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    if total_epochs == 0 {
        return lr0;
    }
    let t = epoch.min(total_epochs) as f64 / total_epochs as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Step decay by `factor` at each of `milestones` (epochs, ascending).
pub fn step_lr(epoch: usize, milestones: &[usize], lr0: f64, factor: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| epoch >= m).count();
    lr0 * factor.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamGroup;
    use crate::nn::tensor::Tensor;

    fn store_with(value: Vec<f64>, grad: Vec<f64>) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", ParamGroup::Weights, Tensor::from_vec(value));
        store.get_mut(id).grad_mut().unwrap().copy_from_slice(&grad);
        (store, id)
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let (mut store, id) = store_with(vec![1.0, -2.0], vec![0.0, 0.0]);
        let mut opt = SgdMomentum::new(0.1, 0.9, 0.0);
        opt.step(&mut store, &[id], 0.5).unwrap();
        assert_eq!(store.get(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn sgd_plain_step() {
        let (mut store, id) = store_with(vec![1.0], vec![0.3]);
        let mut opt = SgdMomentum::new(0.1, 0.0, 0.0);
        opt.step(&mut store, &[id], 0.1).unwrap();
        assert!((store.get(id).data()[0] - (1.0 - 0.1 * 0.3)).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let (g, lr) = (0.5, 0.1);
        let (mut store, id) = store_with(vec![0.0], vec![g]);
        let mut opt = SgdMomentum::new(lr, 0.9, 0.0);
        opt.step(&mut store, &[id], lr).unwrap();
        opt.step(&mut store, &[id], lr).unwrap();
        let total = -store.get(id).data()[0];
        assert!((total - lr * g * (1.0 + 1.9)).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_nan_gradient_with_name() {
        let (mut store, id) = store_with(vec![0.0], vec![f64::NAN]);
        let mut opt = SgdMomentum::new(0.1, 0.9, 0.0);
        let err = opt.step(&mut store, &[id], 0.1).unwrap_err().to_string();
        assert!(err.contains("`p`"), "{err}");
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let (mut store, id) = store_with(vec![0.7, -0.1], vec![0.0, 0.0]);
        let mut opt = AdamState::new(1e-2, 0.0);
        opt.step(&mut store, &[id], 1e-2).unwrap();
        assert_eq!(store.get(id).data(), &[0.7, -0.1]);
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient_sign() {
        let lr = 1e-2;
        let (mut store, id) = store_with(vec![0.0, 0.0, 0.0], vec![3.0, -0.2, 1e-3]);
        let mut opt = AdamState::new(lr, 0.0);
        opt.step(&mut store, &[id], lr).unwrap();
        let grads = [3.0f64, -0.2, 1e-3];
        for (p, g) in store.get(id).data().iter().zip(grads) {
            // |g| / (|g| + eps) differs from 1 by at most eps/|g|
            assert!((p.abs() - lr).abs() <= lr * 1e-8 / g.abs() + 1e-15);
            assert_eq!(p.signum(), -g.signum());
        }
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_decay_is_decoupled_from_moments() {
        // With zero gradient the moments stay zero and only the decay acts.
        let (mut store, id) = store_with(vec![2.0], vec![0.0]);
        let mut opt = AdamState::new(1e-2, 5e-4);
        opt.step(&mut store, &[id], 1e-2).unwrap();
        assert!((store.get(id).data()[0] - 2.0 * (1.0 - 1e-2 * 5e-4)).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 30, 0.1), 0.1);
        assert!(cosine_lr(30, 30, 0.1).abs() < 1e-17);
        assert!((cosine_lr(15, 30, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn step_schedule() {
        let ms = [10, 20, 30];
        assert_eq!(step_lr(0, &ms, 0.1, 0.1), 0.1);
        assert!((step_lr(10, &ms, 0.1, 0.1) - 0.01).abs() < 1e-15);
        assert!((step_lr(35, &ms, 0.1, 0.1) - 1e-4).abs() < 1e-15);
    }
}

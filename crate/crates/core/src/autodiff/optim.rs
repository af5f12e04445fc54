use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id.index()).and_then(|g| g.as_ref()) else {
                continue;
            };
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                p[i] -= lr * self.weight_decay * p[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales gradients so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads
            .iter_mut()
            .flatten()
            .for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub t_max: u64,
}

impl CosineSchedule {
    pub fn lr(&self, t: u64) -> f64 {
        if self.t_max == 0 {
            return self.lr0;
        }
        let phase = PI * t as f64 / self.t_max as f64;
        self.lr_min + (self.lr0 - self.lr_min) * (1.0 + phase.cos()) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn single(v: f64) -> (ParamStore, crate::autodiff::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new([1], vec![v]).unwrap(), true).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = single(0.7);
        let mut opt = AdamW::new(&s, 0.0);
        for _ in 0..5 {
            opt.step(&mut s, &[Some(vec![0.0])], 0.1);
        }
        assert_eq!(s.get(id).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let (mut s, id) = single(1.0);
        let mut opt = AdamW::new(&s, 0.0);
        opt.step(&mut s, &[Some(vec![3.0])], 0.01);
        assert!((s.get(id).item() - 0.99).abs() < 1e-9);
    }

    #[test]
    fn quadratic_converges() {
        let (mut s, id) = single(1.0);
        let mut opt = AdamW::new(&s, 0.0);
        for _ in 0..200 {
            let w = s.get(id).item();
            opt.step(&mut s, &[Some(vec![2.0 * w])], 0.1);
        }
        assert!(s.get(id).item().abs() < 1e-2, "{}", s.get(id).item());
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient_signal() {
        let (mut s, id) = single(2.0);
        let mut opt = AdamW::new(&s, 0.5);
        opt.step(&mut s, &[Some(vec![0.0])], 0.1);
        assert!((s.get(id).item() - 1.9).abs() < 1e-12);
    }

    #[test]
    fn cosine_endpoints() {
        let c = CosineSchedule {
            lr0: 1e-3,
            lr_min: 1e-6,
            t_max: 100,
        };
        assert!((c.lr(0) - 1e-3).abs() < 1e-15);
        assert!((c.lr(100) - 1e-6).abs() < 1e-15);
        assert!((c.lr(50) - (1e-6 + (1e-3 - 1e-6) / 2.0)).abs() < 1e-15);
        assert!((c.lr(200) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Some(vec![3.0, 4.0]), None];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let v = g[0].as_ref().unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
    }
}

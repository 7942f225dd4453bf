//! Adamax with a reduce-on-plateau learning-rate schedule.

use dud_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    /// Patience in epochs; converted to validations by the training loop.
    pub patience_epochs: f64,
    /// Minimum absolute decrease that counts as a new best.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { initial: 3e-4, factor: 0.5, patience_epochs: 10.0, threshold: 1e-6, min_lr: 1e-6 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("training.lr.{f}");
        if !(self.initial.is_finite() && self.initial > 0.0) {
            return Err(Error::invalid(field("initial"), "must be > 0"));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::invalid(field("factor"), "must lie in (0, 1)"));
        }
        if !(self.patience_epochs.is_finite() && self.patience_epochs > 0.0) {
            return Err(Error::invalid(field("patience_epochs"), "must be > 0"));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::invalid(field("threshold"), "must be >= 0"));
        }
        if !(self.min_lr >= 0.0) {
            return Err(Error::invalid(field("min_lr"), "must be >= 0"));
        }
        Ok(())
    }
}

/// Plateau detector: counts validations without a new best.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    /// Counted in validations.
    pub patience: usize,
    pub factor: f64,
    pub threshold: f64,
    pub min_lr: f64,
    pub best: f64,
    pub bad: usize,
}

impl Plateau {
    pub fn new(patience: usize, schedule: &LrSchedule) -> Self {
        Self {
            patience: patience.max(1),
            factor: schedule.factor,
            threshold: schedule.threshold,
            min_lr: schedule.min_lr,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Feeds one validation loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best - self.threshold {
            self.best = loss;
            self.bad = 0;
            return lr;
        }
        self.bad += 1;
        if self.bad < self.patience {
            return lr;
        }
        self.bad = 0;
        if lr > self.min_lr {
            (lr * self.factor).max(self.min_lr)
        } else {
            lr
        }
    }
}

/// Learning rate after replaying `history` through a fresh plateau detector.
pub fn lr_plateau_update(initial: f64, history: &[f64], patience: usize, schedule: &LrSchedule) -> f64 {
    let mut plateau = Plateau::new(patience, schedule);
    history.iter().fold(initial, |lr, &loss| plateau.observe(loss, lr))
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = (max_norm / (norm + 1e-6)) as f32;
        for g in grads.iter_mut().flatten() {
            g.scale_inplace(scale);
        }
    }
    norm
}

/// Adamax state for one parameter store.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First moments, one per parameter in store order.
    pub m: Vec<Tensor>,
    /// Exponentially weighted infinity norms.
    pub u: Vec<Tensor>,
    pub plateau: Plateau,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, lr: f64, plateau: Plateau) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), u: zeros, plateau }
    }

    /// One Adamax update. Parameters without a gradient are left untouched
    /// but still see their moments decay, as if their gradient were zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient count does not match the optimizer");
        self.step += 1;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let step_size = (self.lr / (1.0 - self.beta1.powf(self.step as f64))) as f32;
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let m = self.m[i].data_mut();
            let u = self.u[i].data_mut();
            match &grads[i] {
                Some(g) => {
                    let p = store.get_mut(id).data_mut();
                    for (((p, m), u), &g) in p.iter_mut().zip(m.iter_mut()).zip(u.iter_mut()).zip(g.data()) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *u = (b2 * *u).max(g.abs() + eps);
                        *p -= step_size * *m / *u;
                    }
                }
                None => {
                    for (m, u) in m.iter_mut().zip(u.iter_mut()) {
                        *m *= b1;
                        *u = (b2 * *u).max(eps);
                    }
                }
            }
        }
    }

    /// Plateau update from one validation loss.
    pub fn observe_validation(&mut self, loss: f64) {
        self.lr = self.plateau.observe(loss, self.lr);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dud_tensor::Shape;

    fn sched() -> LrSchedule {
        LrSchedule::default()
    }

    #[test]
    fn decreasing_history_keeps_lr() {
        let h: Vec<f64> = (0..50).map(|i| 10.0 - i as f64 * 0.1).collect();
        assert_eq!(lr_plateau_update(3e-4, &h, 3, &sched()), 3e-4);
    }

    #[test]
    fn flat_history_halves_once() {
        for patience in [1, 3, 10] {
            let h = vec![1.0; patience + 1];
            assert_eq!(lr_plateau_update(3e-4, &h, patience, &sched()), 1.5e-4);
        }
    }

    #[test]
    fn repeated_plateaus_decay_to_floor() {
        let patience = 2;
        for k in 0..15usize {
            // One initial best, then k full plateaus.
            let h = vec![1.0; 1 + k * patience];
            let expected = (3e-4 * 0.5f64.powi(k as i32)).max(1e-6);
            let got = lr_plateau_update(3e-4, &h, patience, &sched());
            assert!((got - expected).abs() < 1e-18, "k={k}: {got} vs {expected}");
        }
    }

    #[test]
    fn tiny_improvements_do_not_count() {
        let h = [1.0, 1.0 - 5e-7, 1.0 - 9e-7];
        assert_eq!(lr_plateau_update(1e-3, &h, 2, &sched()), 5e-4);
    }

    #[test]
    fn lr_never_increases() {
        let mut plateau = Plateau::new(1, &sched());
        let mut lr = 3e-4;
        for i in 0..200 {
            let loss = ((i * 7919) % 13) as f64;
            let next = plateau.observe(loss, lr);
            assert!(next <= lr);
            lr = next;
        }
        assert!(lr >= 1e-6);
    }

    #[test]
    fn adamax_matches_hand_computation() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, -1.0]));
        let mut opt = OptimizerState::new(&store, 0.1, Plateau::new(1, &sched()));
        let g = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.5, -2.0]);
        opt.step(&mut store, &[Some(g.clone())]);
        // t=1: m = 0.1 g, u = |g| + eps, step = lr / 0.1, so p -= lr * sign(g) (up to eps).
        let p = store.get(id).data().to_vec();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6, "{p:?}");
        opt.step(&mut store, &[Some(g)]);
        // t=2: m = 0.19 g, u = |g| (decay only), step = lr / 0.19.
        let p = store.get(id).data().to_vec();
        assert!((p[0] - 0.8).abs() < 1e-5 && (p[1] + 0.8).abs() < 1e-5, "{p:?}");
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.3, -0.7, 1e-3]));
        let before = store.clone();
        let mut opt = OptimizerState::new(&store, 0.0, Plateau::new(1, &sched()));
        let g = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, -3.0]);
        opt.step(&mut store, &[Some(g)]);
        let (a, b) = (store.iter().next().unwrap().2, before.iter().next().unwrap().2);
        assert_eq!(a, b);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut grads = vec![
            Some(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![3.0, 0.0])),
            None,
            Some(Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![4.0])),
        ];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-9);
        let after: f64 = grads.iter().flatten().map(Tensor::sum_sq).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-5);
        let norm = clip_global_norm(&mut grads, 10.0);
        assert!((norm - after).abs() < 1e-9);
    }
}

//! Adam with bias correction. One moment pair per [`ParamId`], so a tied
//! group has a single set no matter how many networks use it.

use std::collections::BTreeMap;

use crate::autograd::Grads;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.5, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam<F> {
    pub step: u64,
    /// First and second moment estimates.
    pub moments: BTreeMap<ParamId, (Tensor<F>, Tensor<F>)>,
}

impl<F: Real> Adam<F> {
    pub fn new() -> Self {
        Self { step: 0, moments: BTreeMap::new() }
    }

    /// Applies one update to every id in `ids` that has a gradient.
    /// Returns `false` and changes nothing when any gradient is non-finite.
    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>, ids: &[ParamId], s: &AdamSettings) -> bool {
        if ids.iter().filter_map(|id| grads.get(*id)).any(|g| !g.all_finite()) {
            return false;
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - s.beta1.powi(t);
        let c2 = 1.0 - s.beta2.powi(t);
        let (b1, b2) = (F::of(s.beta1), F::of(s.beta2));
        let (ob1, ob2) = (F::of(1.0 - s.beta1), F::of(1.0 - s.beta2));
        let (lr, eps) = (F::of(s.learning_rate), F::of(s.epsilon));
        let (ic1, ic2) = (F::of(1.0 / c1), F::of(1.0 / c2));
        for &id in ids {
            let Some(g) = grads.get(id) else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.value_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let mh = *m * ic1;
                let vh = *v * ic2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(g: f64) -> (ParamStore<f64>, ParamId, Grads<f64>) {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::scalar(1.0), true);
        let mut grads = Grads::default();
        grads.map.insert(id, Tensor::scalar(g));
        (store, id, grads)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id, grads) = setup(1.0);
        let mut adam = Adam::new();
        assert!(adam.update(&mut store, &grads, &[id], &AdamSettings::default()));
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        let moved = 1.0 - store.value(id).item();
        assert!((moved - 1e-4 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_parameter() {
        let (mut store, id, grads) = setup(0.0);
        let mut adam = Adam::new();
        adam.update(&mut store, &grads, &[id], &AdamSettings::default());
        assert_eq!(store.value(id).item(), 1.0);
        assert_eq!(adam.moments[&id].0.item(), 0.0);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let (mut store, id, grads) = setup(f64::NAN);
        let mut adam = Adam::new();
        assert!(!adam.update(&mut store, &grads, &[id], &AdamSettings::default()));
        assert_eq!((store.value(id).item(), adam.step), (1.0, 0));
    }

    #[test]
    fn hand_evaluated_recurrence() {
        let (mut store, id, mut grads) = setup(0.3);
        let s = AdamSettings { learning_rate: 0.01, beta1: 0.9, beta2: 0.99, epsilon: 1e-8 };
        let mut adam = Adam::new();
        adam.update(&mut store, &grads, &[id], &s);
        grads.map.insert(id, Tensor::scalar(-0.5));
        adam.update(&mut store, &grads, &[id], &s);
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in [(1, 0.3f64), (2, -0.5)] {
            m = 0.9 * m + 0.1 * g;
            v = 0.99 * v + 0.01 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.99f64.powi(t));
            p -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((store.value(id).item() - p).abs() < 1e-14);
    }
}

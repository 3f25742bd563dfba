//! Adam with bias-corrected first and second moments.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Per-parameter optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub step: u64,
    pub first: Vec<T>,
    pub second: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    steps: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new(T::cst(0.9), T::cst(0.999), T::cst(1e-8))
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: T, beta2: T, eps: T) -> Self {
        Self { beta1, beta2, eps, steps: 0, state: BTreeMap::new() }
    }

    /// Number of calls to [`Adam::step`].
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update. Parameters without a gradient entry are left
    /// untouched, moments and bias correction included.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: T) {
        self.steps += 1;
        let names: Vec<String> = store.trainable_names().map(str::to_owned).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let param = store.get_mut(&name).expect("name from store");
            let n = param.numel();
            assert_eq!(g.numel(), n, "gradient of {name} has the wrong size");
            let s = self
                .state
                .entry(name)
                .or_insert_with(|| Moments { step: 0, first: vec![T::zero(); n], second: vec![T::zero(); n] });
            s.step += 1;
            let t = s.step as i32;
            let bc1 = T::one() - self.beta1.powi(t);
            let bc2 = T::one() - self.beta2.powi(t);
            for ((p, &gi), (m, v)) in
                param.data_mut().iter_mut().zip(g.data()).zip(s.first.iter_mut().zip(s.second.iter_mut()))
            {
                *m = self.beta1 * *m + (T::one() - self.beta1) * gi;
                *v = self.beta2 * *v + (T::one() - self.beta2) * gi * gi;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Moments<T>)> {
        self.state.iter().map(|(k, m)| (k.as_str(), m))
    }

    pub fn restore(&mut self, steps: u64, moments: impl IntoIterator<Item = (String, Moments<T>)>) {
        self.steps = steps;
        self.state = moments.into_iter().collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // One Adam step moves every coordinate by ~lr against the gradient sign.
    #[test]
    fn first_step_is_sign_scaled() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]), true);
        store.insert("buf", Tensor::new(vec![1], vec![7.0]), false);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![3], vec![0.3, -4.0, 0.0]));
        let mut adam = Adam::default();
        adam.step(&mut store, &grads, 0.01);
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 1.99).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
        assert_eq!(store.get("buf").unwrap().data(), &[7.0]);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::new(vec![2], vec![3.0, -1.0]), true);
        let mut adam = Adam::default();
        for _ in 0..2000 {
            let x = store.get("x").unwrap().data().to_vec();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::new(vec![2], vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] - 2.0)]));
            adam.step(&mut store, &grads, 0.05);
        }
        let x = store.get("x").unwrap().data();
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] - 2.0).abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn parameters_without_gradients_are_skipped() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::new(vec![1], vec![1.0]), true);
        store.insert("b", Tensor::new(vec![1], vec![1.0]), true);
        let mut adam = Adam::default();
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::new(vec![1], vec![1.0]));
        for _ in 0..5 {
            adam.step(&mut store, &grads, 0.1);
        }
        assert_eq!(store.get("b").unwrap().data(), &[1.0]);
        let steps: Vec<u64> = adam.moments().map(|(_, m)| m.step).collect();
        assert_eq!(steps, vec![5]);
        grads.insert("b".to_string(), Tensor::new(vec![1], vec![1.0]));
        adam.step(&mut store, &grads, 0.1);
        // a fresh parameter takes a full bias-corrected first step
        assert!((store.get("b").unwrap().data()[0] - 0.9).abs() < 1e-6);
    }
}

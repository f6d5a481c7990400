//! Adam with optional global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Tensor<f32>>,
    second: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>) {
        self.update_tensors(params.iter_mut(), grads);
    }

    /// As [`Adam::update`] over arbitrary named tensors; moments are keyed by
    /// name, so names must be unique across calls.
    pub fn update_tensors<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<f32>)>,
        grads: &BTreeMap<String, Tensor<f32>>,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = (self.lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let eps_hat = eps * (bc2.sqrt() as f32);
        for (name, p) in params {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() + eps_hat);
            }
        }
    }
}

pub fn global_norm<T: Real>(grads: &BTreeMap<String, Tensor<T>>) -> T {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&v| v * v)
        .sum::<T>()
        .sqrt()
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> T {
    let norm = global_norm(grads);
    let max = T::of(max_norm);
    if norm > max {
        let s = max / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamStore::<f32>::new();
        p.insert("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::from_vec(&[2], vec![0.5, -3.0]).unwrap());
        let mut adam = Adam::new(0.01);
        adam.update(&mut p, &g);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::from_vec(&[2], vec![30.0f64, 40.0]).unwrap());
        let before = clip_global_norm(&mut g, 10.0);
        assert!((before - 50.0).abs() < 1e-12);
        assert!((global_norm(&g) - 10.0).abs() < 1e-12);
    }
}

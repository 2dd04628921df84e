//! Decoupled-weight-decay adaptive moment optimizer and a gradient
//! accumulator for averaging per-rollout gradients before a step.

use super::params::ParamStore;
use super::tape::ParamGrads;
use ndarray::Array2;

/// Dense gradients aligned with a parameter store, summed across backward
/// passes. Parameters a pass never touched contribute nothing.
pub struct GradAccumulator {
    grads: Vec<Array2<f64>>,
}

impl GradAccumulator {
    pub fn zeros(store: &ParamStore) -> Self {
        GradAccumulator {
            grads: (0..store.len())
                .map(|i| Array2::zeros(store.value(i).dim()))
                .collect(),
        }
    }

    /// Adds `scale ·` each gradient from one backward pass.
    pub fn add_scaled(&mut self, g: &ParamGrads, scale: f64) {
        for (i, acc) in self.grads.iter_mut().enumerate() {
            if let Some(delta) = g.get(i) {
                acc.zip_mut_with(delta, |a, &d| *a += scale * d);
            }
        }
    }

    pub fn get(&self, idx: usize) -> &Array2<f64> {
        &self.grads[idx]
    }

    pub fn reset(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// AdamW: adaptive moments with bias correction and weight decay applied
/// directly to the parameters rather than through the gradient.
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    /// Moments start at zero; with zero weight decay a parameter whose
    /// gradient is identically zero never moves.
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Array2<f64>> = (0..store.len())
            .map(|i| Array2::zeros(store.value(i).dim()))
            .collect();
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccumulator) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for i in 0..store.len() {
            let g = grads.get(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let theta = store.value_mut(i);
            ndarray::Zip::from(&mut *theta)
                .and(&*m)
                .and(&*v)
                .for_each(|t, &m, &v| {
                    let mhat = m / c1;
                    let vhat = v / c2;
                    *t -= self.learning_rate * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *t);
                });
        }
    }
}

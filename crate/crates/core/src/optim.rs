//! Adam with a one-cycle learning-rate schedule and global norm clipping.

use serde::{Deserialize, Serialize};

use crate::nn::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub lr_min: f64,
    pub lr_max: f64,
    pub total_steps: usize,
    /// Fraction of steps spent warming up.
    pub pct_start: f64,
}

impl OneCycle {
    /// Cosine ramp from `lr_min` up to `lr_max`, then cosine decay back.
    pub fn lr(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1) as f64;
        let up = (self.pct_start * total).max(1.0);
        let s = step as f64;
        let cos = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac.clamp(0.0, 1.0)).cos());
        if s < up {
            cos(self.lr_min, self.lr_max, s / up)
        } else {
            cos(self.lr_max, self.lr_min, (s - up) / (total - up).max(1.0))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    /// Moment buffers keyed by parameter name, so state survives a reload.
    pub state: std::collections::BTreeMap<String, AdamState>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, state: Default::default() }
    }
}

/// Global L2 norm over a gradient set.
pub fn grad_norm(grads: &[(ParamId, Vec<f64>)]) -> f64 {
    grads.iter().flat_map(|(_, g)| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales gradients in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

impl Adam {
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads {
            let name = store.get(*id).name.clone();
            let st = self.state.entry(name).or_insert_with(|| AdamState { m: vec![0.0; g.len()], v: vec![0.0; g.len()] });
            let w = store.value_mut(*id);
            for i in 0..g.len() {
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g[i];
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = st.m[i] / bc1;
                let vh = st.v[i] / bc2;
                w[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Group, Init};
    use rand::SeedableRng;

    #[test]
    fn one_cycle_endpoints() {
        let s = OneCycle { lr_min: 1e-5, lr_max: 5e-5, total_steps: 100, pct_start: 0.3 };
        assert!((s.lr(0) - 1e-5).abs() < 1e-15);
        assert!((s.lr(30) - 5e-5).abs() < 1e-15);
        assert!((s.lr(100) - 1e-5).abs() < 1e-15);
        for k in 0..100 {
            let lr = s.lr(k);
            assert!((1e-5 - 1e-18..=5e-5 + 1e-18).contains(&lr));
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let id = store.add("x", Group::MotionBlocks, &[3], Init::Normal(1.0), &mut rng);
        let mut opt = Adam::default();
        for _ in 0..2000 {
            let g: Vec<f64> = store.get(id).value().iter().map(|v| 2.0 * (v - 0.5)).collect();
            opt.step(&mut store, &[(id, g)], 1e-2);
        }
        for v in store.get(id).value() {
            assert!((v - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![(ParamId(0), vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
    }
}

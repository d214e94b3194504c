use serde::{Deserialize, Serialize};

use crate::numerics::{GradBuffer, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `p -= lr · wd · p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with bias correction. Moments are kept per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |s: &ParamStore<T>| s.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        Adam { config, m: zeros(store), v: zeros(store), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`. Parameters without a gradient are untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradBuffer<T>, lr: f64) {
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let lr_t = T::of(lr);
        let decay = T::of(lr * c.weight_decay);
        let eps = T::of(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(grad) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= decay * p[i];
                p[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
    Linear,
}

/// Linear warmup over the first `ceil(warmup · total)` steps, then decay to zero.
pub fn lr_at(kind: ScheduleKind, base: f64, warmup: f64, step: usize, total: usize) -> f64 {
    let total = total.max(1);
    let warm = (warmup * total as f64).ceil() as usize;
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let progress = ((step - warm) as f64 / span).min(1.0);
    match kind {
        ScheduleKind::Constant => base,
        ScheduleKind::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        ScheduleKind::Linear => base * (1.0 - progress),
    }
}

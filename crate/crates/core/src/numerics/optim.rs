use serde::{Deserialize, Serialize};

use super::array::{lit, Real};
use super::params::ParamStore;

/// AdamW with a single step-decay of the learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Step index after which the learning rate is divided by `decay_factor`.
    pub decay_after: usize,
    pub decay_factor: f64,
    /// Global L2 clip on the gradient; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decay_after: usize::MAX,
            decay_factor: 10.0,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: usize,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .entries()
            .iter()
            .map(|e| vec![T::zero(); e.array.len()])
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        if self.step >= self.cfg.decay_after {
            self.cfg.lr / self.cfg.decay_factor
        } else {
            self.cfg.lr
        }
    }

    /// Applies one update from the accumulated gradients (scaled by
    /// `grad_scale`) and clears them. Returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut ParamStore<T>, grad_scale: f64) -> f64 {
        let norm = params
            .entries()
            .iter()
            .filter_map(|e| e.array.grad())
            .flat_map(|g| g.iter())
            .map(|&g| {
                let g = g.as_f64() * grad_scale;
                g * g
            })
            .sum::<f64>()
            .sqrt();
        let clip = match self.cfg.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let lr = self.learning_rate();
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let scale: T = lit(grad_scale * clip);
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            let Some(grad) = entry.array.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = entry.array.data_mut();
            for j in 0..data.len() {
                let g = grad[j] * scale;
                m[j] = lit::<T>(b1) * m[j] + lit::<T>(1.0 - b1) * g;
                v[j] = lit::<T>(b2) * v[j] + lit::<T>(1.0 - b2) * g * g;
                let mhat = m[j].as_f64() / bc1;
                let vhat = v[j].as_f64() / bc2;
                let upd = mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * data[j].as_f64();
                data[j] = data[j] - lit(lr * upd);
            }
            entry.array.zero_grad();
        }
        norm
    }
}

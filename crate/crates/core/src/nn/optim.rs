//! Parameter and latent optimizers.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f32>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: Some(1.0),
        }
    }
}

/// Moment accumulators, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (name, t) in params.iter() {
                s.insert(name, Tensor::zeros(t.shape()));
            }
            s
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub grad_norm: f32,
    pub clip_scale: f32,
}

/// Global L2 norm over every tensor in `grads`.
pub fn global_norm(grads: &ParamStore) -> f32 {
    grads
        .iter()
        .flat_map(|(_, t)| t.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt() as f32
}

/// Clip by global norm, then a decoupled-weight-decay Adam update.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut OptimState,
    cfg: &AdamWConfig,
) -> Result<StepStats, NnError> {
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(NnError::NonFinite(format!("gradient of {name}")));
        }
    }
    let norm = global_norm(grads);
    let clip_scale = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.try_get(name) else { continue };
        let m = state.m.get_mut(name).data_mut();
        let v = state.v.get_mut(name).data_mut();
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let gi = gi * clip_scale;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let update = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
            *pi -= cfg.lr * (update + cfg.weight_decay * *pi);
        }
    }
    Ok(StepStats {
        grad_norm: norm,
        clip_scale,
    })
}

/// Learning rate `lr0 * (1 + cos(pi * step / total)) / 2`, reaching 0 at `total`.
pub fn cosine_decay(lr0: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return lr0;
    }
    let frac = (step.min(total) as f64) / total as f64;
    (lr0 as f64 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())) as f32
}

/// Adam for a single vector being maximized or minimized by the caller.
#[derive(Clone, Debug, PartialEq)]
pub struct VecAdam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl VecAdam {
    pub fn new(dim: usize, beta1: f32, beta2: f32) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    /// The bias-corrected direction for gradient `g`; the caller scales it by
    /// the learning rate.
    pub fn direction(&mut self, g: &[f32]) -> Vec<f32> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        g.iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&gi, (mi, vi))| {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f32]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new([vals.len()], vals.to_vec()));
        s
    }

    #[test]
    fn zero_gradient_only_applies_weight_decay() {
        let mut params = store(&[1.0, -2.0]);
        let grads = store(&[0.0, 0.0]);
        let mut state = OptimState::new(&params);
        let cfg = AdamWConfig::default();
        adamw_step(&mut params, &grads, &mut state, &cfg).unwrap();
        let shrink = 1.0 - cfg.lr * cfg.weight_decay;
        assert_eq!(params.get("p").data(), &[shrink, -2.0 * shrink]);
    }

    #[test]
    fn clipping_scales_gradient_to_the_norm() {
        let mut params = store(&[0.0, 0.0]);
        let grads = store(&[6.0, 8.0]);
        let mut state = OptimState::new(&params);
        let stats = adamw_step(&mut params, &grads, &mut state, &AdamWConfig::default()).unwrap();
        assert_eq!(stats.grad_norm, 10.0);
        assert!((stats.clip_scale - 0.1).abs() < 1e-7);
        let m = state.m.get("p").data();
        assert!((m[0] - 0.1 * 0.6).abs() < 1e-7 && (m[1] - 0.1 * 0.8).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_is_rejected_before_any_update() {
        let mut params = store(&[1.0]);
        let before = params.clone();
        let grads = store(&[f32::NAN]);
        let mut state = OptimState::new(&params);
        assert!(matches!(
            adamw_step(&mut params, &grads, &mut state, &AdamWConfig::default()),
            Err(NnError::NonFinite(_))
        ));
        assert_eq!(params, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn replayed_steps_are_bitwise_identical() {
        let run = || {
            let mut params = store(&[0.3, -0.7, 1.1]);
            let mut state = OptimState::new(&params);
            for k in 0..2 {
                let grads = store(&[0.5 + k as f32, -0.25, 2.0]);
                adamw_step(&mut params, &grads, &mut state, &AdamWConfig::default()).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_decay(1.0, 0, 10), 1.0);
        assert!((cosine_decay(1.0, 5, 10) - 0.5).abs() < 1e-7);
        assert!(cosine_decay(1.0, 10, 10).abs() < 1e-7);
    }

    #[test]
    fn vec_adam_first_direction_is_sign() {
        let mut adam = VecAdam::new(2, 0.9, 0.9);
        let d = adam.direction(&[3.0, -0.01]);
        assert!((d[0] - 1.0).abs() < 1e-5 && (d[1] + 1.0).abs() < 1e-3);
    }
}

//! AdamW with decoupled weight decay, a warmup-cosine schedule and global
//! gradient-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Parameters, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.0,
        }
    }
}

/// Linear warmup from 0 over `floor(warmup_ratio * steps)` steps, then
/// cosine decay from `peak` to 0 at `steps`.
pub fn lr_at(peak: f64, warmup_ratio: f64, steps: usize, step: usize) -> Result<f64> {
    if step > steps {
        return Err(Error::InvalidArgument(format!("step {step} beyond {steps}")));
    }
    let warmup = (warmup_ratio * steps as f64).floor() as usize;
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    if steps == warmup {
        return Ok(0.0);
    }
    let progress = (step - warmup) as f64 / (steps - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// First and second moments keyed by tensor name. Entries are created only
/// for trainable tensors that received a gradient.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

/// One AdamW update of every trainable tensor holding a gradient.
pub fn adamw_step<P: Parameters<f32> + ?Sized>(
    params: &mut P,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let mut bad = None;
    params.visit(&mut |name, t| {
        if bad.is_none() && t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            bad = Some(name.to_string());
        }
    });
    if let Some(name) = bad {
        return Err(Error::NonFinite(format!("gradient of `{name}`")));
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = cfg.beta1 as f32;
    let b2 = cfg.beta2 as f32;
    let bc1 = (1.0 - cfg.beta1.powi(t)) as f32;
    let bc2 = (1.0 - cfg.beta2.powi(t)) as f32;
    let eps = cfg.eps as f32;
    let lr = lr as f32;
    let decay = lr * cfg.weight_decay as f32;
    let moments = &mut state.moments;
    params.visit_mut(&mut |name, tensor: &mut Tensor<f32>| {
        if !tensor.trainable() {
            return;
        }
        let Some(grad) = tensor.grad().map(<[f32]>::to_vec) else {
            return;
        };
        let mo = moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
        });
        for (((p, &g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(&mut mo.m).zip(&mut mo.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= decay * *p + lr * m_hat / (v_hat.sqrt() + eps);
        }
    });
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<P: Parameters<f32> + ?Sized>(params: &mut P, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    params.visit(&mut |_, t| {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = (max_norm / (norm + 1e-6)) as f32;
        params.visit_mut(&mut |name, t| {
            if let Some(g) = t.grad().map(<[f32]>::to_vec) {
                let scaled: Vec<f32> = g.iter().map(|v| v * scale).collect();
                t.zero_grad();
                t.accumulate_grad(name, &scaled).expect("gradient slot exists only on trainable tensors");
            }
        });
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Tensor<f32>);

    impl Parameters<f32> for One {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
            f("w", &self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
            f("w", &mut self.0);
        }
    }

    fn one(values: &[f32]) -> One {
        let mut t = Tensor::from_vec(&[values.len()], values.to_vec()).unwrap();
        t.set_trainable(true);
        One(t)
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(1e-3, 0.03, 500, 0).unwrap(), 0.0);
        // floor(0.03 * 500) = 15
        assert_eq!(lr_at(1e-3, 0.03, 500, 15).unwrap(), 1e-3);
        assert!(lr_at(1e-3, 0.03, 500, 500).unwrap().abs() < 1e-12);
        assert!(lr_at(1e-3, 0.03, 500, 501).is_err());
        assert_eq!(lr_at(1e-3, 0.03, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn single_step_matches_direct_formula() {
        let mut p = one(&[0.5, -1.0, 2.0]);
        let g = [0.1f32, -0.2, 0.3];
        p.0.accumulate_grad("w", &g).unwrap();
        let mut state = OptimizerState::default();
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &mut state, 1e-3, &cfg).unwrap();
        let expect: Vec<f32> = [0.5f32, -1.0, 2.0]
            .iter()
            .zip(&g)
            .map(|(&w, &gi)| {
                let m = 0.9f32 * 0.0 + (1.0 - 0.9f32) * gi;
                let v = 0.98f32 * 0.0 + (1.0 - 0.98f32) * gi * gi;
                let m_hat = m / (1.0 - 0.9f64) as f32;
                let v_hat = v / (1.0 - 0.98f64) as f32;
                w - (1e-3f32 * 0.01f32 * w + 1e-3f32 * m_hat / (v_hat.sqrt() + 1e-6f32))
            })
            .collect();
        assert_eq!(p.0.data(), &expect[..]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn constant_gradient_steps_by_about_lr() {
        let mut p = one(&[0.0, 0.0]);
        let mut state = OptimizerState::default();
        let cfg = AdamWConfig::default();
        for _ in 0..200 {
            p.0.zero_grad();
            p.0.accumulate_grad("w", &[3.0, -0.01]).unwrap();
            let before = p.0.data().to_vec();
            adamw_step(&mut p, &mut state, 0.01, &cfg).unwrap();
            let d0 = p.0.data()[0] - before[0];
            let d1 = p.0.data()[1] - before[1];
            assert!((d0 + 0.01).abs() < 1e-4);
            assert!((d1 - 0.01).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameters() {
        let mut p = one(&[1.0, 2.0]);
        p.0.accumulate_grad("w", &[0.0, 0.0]).unwrap();
        let mut state = OptimizerState::default();
        adamw_step(&mut p, &mut state, 0.1, &AdamWConfig::default()).unwrap();
        assert_eq!(p.0.data(), &[1.0, 2.0]);
    }

    #[test]
    fn frozen_tensors_get_no_state() {
        let mut p = one(&[1.0]);
        p.0.accumulate_grad("w", &[1.0]).unwrap();
        p.0.set_trainable(false);
        let mut state = OptimizerState::default();
        adamw_step(&mut p, &mut state, 0.1, &AdamWConfig::default()).unwrap();
        assert!(state.moments.is_empty());
        assert_eq!(p.0.data(), &[1.0]);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = one(&[1.0]);
        p.0.accumulate_grad("w", &[f32::NAN]).unwrap();
        let err = adamw_step(&mut p, &mut OptimizerState::default(), 0.1, &AdamWConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut p = one(&[0.0, 0.0]);
        p.0.accumulate_grad("w", &[3.0, 4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut p, 1.0), 5.0);
        let g = p.0.grad().unwrap();
        assert!(((g[0] * g[0] + g[1] * g[1]).sqrt() - 1.0).abs() < 1e-5);
    }
}

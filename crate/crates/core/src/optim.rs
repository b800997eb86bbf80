//! AdamW with decoupled weight decay, and the warmup/decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub peak_lr: f64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: AdamWConfig, peak_lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        OptimizerState {
            config,
            peak_lr,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }
}

/// One AdamW update with learning rate `lr`. Gradients are left in place.
pub fn adamw_step(params: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.first_moment.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} parameters, store has {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.tensor.grad().is_none() {
            return Err(Error::Contract(format!("parameter {} has no gradient", p.name)));
        }
        if state.first_moment[i].len() != p.tensor.numel() {
            return Err(Error::Contract(format!("moment shape mismatch for {}", p.name)));
        }
    }
    let AdamWConfig {
        beta1,
        beta2,
        epsilon,
        weight_decay,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let decay = if p.decay { 1.0 - lr * weight_decay } else { 1.0 };
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w = *w * decay - lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Linear warmup over the first `warmup_fraction` of steps, then linear decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, total_steps: usize) -> Self {
        LrSchedule {
            peak_lr,
            total_steps,
            warmup_fraction: 0.05,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.total_steps as f64 * self.warmup_fraction).ceil() as usize).max(1)
    }

    /// Learning rate for the 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            self.peak_lr * (step + 1) as f64 / warm as f64
        } else if step >= self.total_steps {
            0.0
        } else {
            let span = (self.total_steps - warm).max(1) as f64;
            self.peak_lr * (self.total_steps - step) as f64 / span
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("p", Tensor::new(vec![values.len()], values.to_vec()).unwrap(), true);
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut s = store(&[1.5, -2.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(&s, cfg, 0.1);
        s.iter_mut().next().unwrap().tensor.accumulate_grad(&[0.0, 0.0]).unwrap();
        adamw_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().tensor.data(), &[1.5, -2.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn decay_only_shrinks_by_lr_times_wd() {
        let mut s = store(&[2.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut st = OptimizerState::new(&s, cfg, 0.1);
        s.iter_mut().next().unwrap().tensor.accumulate_grad(&[0.0]).unwrap();
        adamw_step(&mut s, &mut st, 0.1).unwrap();
        let p = s.iter().next().unwrap().tensor.data()[0];
        assert!((p - 2.0 * (1.0 - 0.1 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m = 0.05, v = 0.00025, m̂ = 0.5, v̂ = 0.25 → p' = 1 − 0.1·0.5/(0.5 + 1e-8)
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        let mut s = store(&[1.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(&s, cfg, 0.1);
        s.iter_mut().next().unwrap().tensor.accumulate_grad(&[0.5]).unwrap();
        adamw_step(&mut s, &mut st, 0.1).unwrap();
        let p = s.iter().next().unwrap().tensor.data()[0];
        assert!((p - expected).abs() < 1e-15, "{p} vs {expected}");
        assert!((p - 0.900_000_002).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut s = store(&[1.0]);
        let mut st = OptimizerState::new(&s, AdamWConfig::default(), 0.1);
        let err = adamw_step(&mut s, &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains("parameter p"), "{err}");
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let s = LrSchedule::new(1.0, 100);
        assert_eq!(s.warmup_steps(), 5);
        assert!((s.lr(0) - 0.2).abs() < 1e-15);
        assert!((s.lr(4) - 1.0).abs() < 1e-15);
        assert!((s.lr(5) - 1.0).abs() < 1e-15);
        assert!(s.lr(99) > 0.0 && s.lr(99) < 0.02);
        assert_eq!(s.lr(100), 0.0);
        for i in 5..99 {
            assert!(s.lr(i + 1) < s.lr(i));
        }
    }
}

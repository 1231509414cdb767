//! AdamW with decoupled weight decay, global-norm gradient clipping and the
//! single-cycle cosine learning-rate schedule.

use std::f64::consts::PI;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::NamedTensor;
use crate::error::{Error, Result};
use crate::nn::scalar;

/// `0.5 * initial_lr * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, initial_lr: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if step == total_steps {
        return Ok(0.0);
    }
    Ok(0.5 * initial_lr * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug)]
pub struct AdamW {
    config: AdamWConfig,
    vars: Vec<Var>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new(vars: Vec<Var>, config: AdamWConfig) -> Result<Self> {
        let first = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let second = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let steps = vec![0; vars.len()];
        Ok(Self {
            config,
            vars,
            first,
            second,
            steps,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Global L2 norm over the gradients of this optimizer's parameters.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for var in &self.vars {
            if let Some(g) = grads.get(var) {
                total += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        Ok(total.sqrt())
    }

    /// One update. Gradients are scaled by `grad_scale` first (for clipping);
    /// parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64, grad_scale: f64) -> Result<()> {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for i in 0..self.vars.len() {
            let var = &self.vars[i];
            let Some(g) = grads.get(var) else { continue };
            // moments must not keep the backward graph alive across steps
            let g = if grad_scale == 1.0 { g.detach() } else { (g.detach() * grad_scale)? };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let m = ((&self.first[i] * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((&self.second[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&m / (1.0 - beta1.powi(t)))?;
            let v_hat = (&v / (1.0 - beta2.powi(t)))?;
            let decayed = (var.as_tensor().detach() * (1.0 - lr * weight_decay))?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.first[i] = m.detach();
            self.second[i] = v.detach();
        }
        Ok(())
    }

    /// Clips to `max_norm` (when given) and steps; returns the pre-clip norm.
    pub fn clipped_step(&mut self, grads: &GradStore, lr: f64, max_norm: Option<f64>) -> Result<f64> {
        let norm = self.grad_norm(grads)?;
        let scale = match max_norm {
            Some(max) if norm > max => max / (norm + 1e-6),
            _ => 1.0,
        };
        self.step(grads, lr, scale)?;
        Ok(norm)
    }

    pub fn export(&self, prefix: &str) -> Result<Vec<NamedTensor>> {
        let mut out = Vec::with_capacity(2 * self.vars.len() + 1);
        for (i, (m, v)) in self.first.iter().zip(&self.second).enumerate() {
            out.push(NamedTensor::from_tensor(format!("{prefix}m{i}"), m)?);
            out.push(NamedTensor::from_tensor(format!("{prefix}v{i}"), v)?);
        }
        let steps = Tensor::from_vec(self.steps.iter().map(|&s| s as f64).collect::<Vec<_>>(), self.steps.len(), &crate::nn::device())?;
        out.push(NamedTensor::from_tensor(format!("{prefix}steps"), &steps)?);
        Ok(out)
    }

    pub fn import(&mut self, prefix: &str, tensors: &[NamedTensor]) -> Result<()> {
        let find = |name: String| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::InvalidValue(format!("optimizer state lacks {name}")))
        };
        for i in 0..self.vars.len() {
            let dtype = self.vars[i].dtype();
            self.first[i] = find(format!("{prefix}m{i}"))?.to_tensor()?.to_dtype(dtype)?;
            self.second[i] = find(format!("{prefix}v{i}"))?.to_tensor()?.to_dtype(dtype)?;
        }
        let steps: Vec<f64> = find(format!("{prefix}steps"))?.to_tensor()?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
        if steps.len() != self.vars.len() {
            return Err(Error::shape(format!("{} step counters", self.vars.len()), format!("{}", steps.len())));
        }
        self.steps = steps.into_iter().map(|s| s as u64).collect();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::device;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 5e-4).unwrap(), 5e-4);
        assert_eq!(cosine_lr(100, 100, 5e-4).unwrap(), 0.0);
        assert!((cosine_lr(50, 100, 5e-4).unwrap() - 2.5e-4).abs() < 1e-18);
        assert!(matches!(cosine_lr(101, 100, 1.0), Err(Error::StepOutOfRange { .. })));
        // monotone non-increasing
        let lrs: Vec<f64> = (0..=30).map(|s| cosine_lr(s, 30, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    /// One step on 0.5 * |theta|^2 against the closed-form decoupled update.
    #[test]
    fn adamw_step_matches_closed_form() {
        let theta0 = vec![1.5f64, -0.25, 3.0, 0.0, -2.0];
        let var = Var::from_vec(theta0.clone(), theta0.len(), &device()).unwrap();
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::new(vec![var.clone()], cfg).unwrap();
        let lr = 1e-2;
        let loss = (var.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&grads, lr, 1.0).unwrap();
        let got: Vec<f64> = var.as_tensor().to_vec1().unwrap();
        for (g, t) in got.iter().zip(&theta0) {
            // m_hat = theta, v_hat = theta^2 after bias correction
            let want = t * (1.0 - lr * cfg.weight_decay) - lr * t / (t.abs() + cfg.eps);
            assert!((g - want).abs() < 1e-10, "{g} vs {want}");
        }
    }

    #[test]
    fn clipping_scales_gradients() {
        let var = Var::from_vec(vec![3.0f64, 4.0], 2, &device()).unwrap();
        let loss = (var.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let grads = loss.backward().unwrap();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(vec![var.clone()], cfg).unwrap();
        let norm = opt.clipped_step(&grads, 0.1, Some(1.0)).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        // Adam normalises magnitudes, so the first step is ~lr in each coordinate regardless.
        let got: Vec<f64> = var.as_tensor().to_vec1().unwrap();
        assert!((got[0] - 2.9).abs() < 1e-6 && (got[1] - 3.9).abs() < 1e-6);
    }

    #[test]
    fn state_round_trip() {
        let var = Var::from_vec(vec![1.0f32, 2.0], 2, &device()).unwrap();
        let mut opt = AdamW::new(vec![var.clone()], AdamWConfig::default()).unwrap();
        let grads = var.as_tensor().sum_all().unwrap().backward().unwrap();
        opt.step(&grads, 0.1, 1.0).unwrap();
        let state = opt.export("o.").unwrap();
        let mut other = AdamW::new(vec![var.clone()], AdamWConfig::default()).unwrap();
        other.import("o.", &state).unwrap();
        assert_eq!(other.steps, vec![1]);
        assert_eq!(
            other.first[0].to_vec1::<f32>().unwrap(),
            opt.first[0].to_vec1::<f32>().unwrap()
        );
    }
}

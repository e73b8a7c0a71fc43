//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::f64::consts::PI;

use super::params::ParamStore;
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<F = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    first_moment: Vec<Tensor<F>>,
    second_moment: Vec<Tensor<F>>,
}

impl<F: Float> OptimizerState<F> {
    pub fn new(params: &ParamStore<F>, config: AdamWConfig) -> Self {
        let zeros = |p: &super::params::Param<F>| Tensor::zeros(p.value.shape());
        Self {
            config,
            step: 0,
            first_moment: params.iter().map(zeros).collect(),
            second_moment: params.iter().map(zeros).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One AdamW update from the gradients stored in `params`. Parameters
    /// whose `trainable` flag is false are not touched at all.
    pub fn step(&mut self, params: &mut ParamStore<F>) -> Result<()> {
        if self.first_moment.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for p in params.iter().filter(|p| p.trainable) {
            if !p.grad.all_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            if !p.trainable {
                continue;
            }
            let (w, g) = (p.value.data_mut(), p.grad.data());
            for i in 0..w.len() {
                let gi = g[i].as_f64();
                let mi = c.beta1 * m.data()[i].as_f64() + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i].as_f64() + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = F::lit(mi);
                v.data_mut()[i] = F::lit(vi);
                let update = c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                let wi = w[i].as_f64() * decay - update;
                w[i] = F::lit(wi);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at step 0 down to `lr_min` at `total`.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(lr_max: f64, total_steps: usize) -> Self {
        Self {
            lr_max,
            lr_min: 0.0,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lr_max;
        }
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Partition;

    fn scalar_store(w: f32, g: f32, trainable: bool) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let id = s.add("w", Partition::Qformer, Tensor::vector(&[w])).unwrap();
        s.get_mut(id).grad = Tensor::vector(&[g]);
        s.get_mut(id).trainable = trainable;
        s
    }

    #[test]
    fn zero_grad_no_decay_leaves_value() {
        let mut s = scalar_store(0.7, 0.0, true);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&s, cfg);
        opt.step(&mut s).unwrap();
        assert_eq!(s.by_name("w").unwrap().value.data()[0], 0.7);
    }

    #[test]
    fn frozen_param_is_bit_identical() {
        let mut s = scalar_store(0.123_456_79, 5.0, false);
        let before = s.by_name("w").unwrap().value.data()[0].to_bits();
        let mut opt = OptimizerState::new(&s, AdamWConfig::default());
        for _ in 0..3 {
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.by_name("w").unwrap().value.data()[0].to_bits(), before);
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn one_hand_rolled_step() {
        // m = 0.1, v = 0.001, m̂ = 1, v̂ = 1 → w = 1 - 0.1 * 1 / (1 + 1e-8)
        let mut s = scalar_store(1.0, 1.0, true);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut opt = OptimizerState::new(&s, cfg);
        opt.step(&mut s).unwrap();
        let w = s.by_name("w").unwrap().value.data()[0] as f64;
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-7, "{w}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = scalar_store(1.0, f32::NAN, true);
        let mut opt = OptimizerState::new(&s, AdamWConfig::default());
        match opt.step(&mut s) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule::new(1e-3, 100);
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(50) - 5e-4).abs() < 1e-12);
        assert!(s.lr(100).abs() < 1e-15);
    }
}

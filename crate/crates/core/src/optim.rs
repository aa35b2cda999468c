//! AdamW and a warmup-plus-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{field}.lr"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(format!("{field}.beta"), "betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config(format!("{field}.eps"), "eps must be positive and decay non-negative"));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam over a fixed list of tensors. Tensors without
/// a gradient in a step keep their value and moments.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: Vec<u64>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        Self {
            config,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            steps: vec![0; sizes.len()],
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, eps) = (T::one(), T::of(c.eps));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = T::of(1.0 - c.beta1.powi(t));
            let bc2 = T::of(1.0 - c.beta2.powi(t));
            let lr_t = T::of(lr);
            let decay = T::of(1.0 - lr * c.weight_decay);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w = *w * decay - lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak`, then cosine decay to `peak * min_ratio`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
    pub min_ratio: f64,
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            peak: lr,
            warmup: 0,
            total: 0,
            min_ratio: 1.0,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        if self.total <= self.warmup {
            return self.peak;
        }
        let p = ((step - self.warmup) as f64 / (self.total - self.warmup) as f64).min(1.0);
        let floor = self.peak * self.min_ratio;
        floor + (self.peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Scales all gradients down so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.sum_squares().as_f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        let mut p = Tensor::<f64>::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = Tensor::<f64>::new([3], vec![0.5, -4.0, 0.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.1), [&p]);
        opt.step(&mut [&mut p], &[Some(&g)], 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] - 2.1).abs() < 1e-6);
        assert_eq!(p.data()[2], 3.0);
    }

    #[test]
    fn missing_gradient_leaves_tensor_alone() {
        let mut p = Tensor::<f32>::new([2], vec![1.0, 2.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.1), [&p]);
        opt.step(&mut [&mut p], &[None], 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::<f64>::new([2], vec![3.0, -2.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.05), [&p]);
        for _ in 0..500 {
            let g = Tensor::new([2], p.data().iter().map(|x| 2.0 * x).collect()).unwrap();
            opt.step(&mut [&mut p], &[Some(&g)], 0.05).unwrap();
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn schedule_shape() {
        let s = Schedule {
            peak: 1.0,
            warmup: 10,
            total: 110,
            min_ratio: 0.1,
        };
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!((s.lr(60) - 0.55).abs() < 1e-12);
        assert!((s.lr(110) - 0.1).abs() < 1e-12);
        assert_eq!(Schedule::constant(0.3).lr(1000), 0.3);
    }

    #[test]
    fn clipping_caps_joint_norm() {
        let mut g = vec![Some(Tensor::<f64>::new([2], vec![3.0, 4.0]).unwrap()), None];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap().sum_squares() - 1.0).abs() < 1e-12);
    }
}

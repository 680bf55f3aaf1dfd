//! Adam with optional global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// First and second moment buffers plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: &ParamStore<S>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Non-finite gradients abort before anything changes; the
    /// error names the parameter. Returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &mut [Tensor<S>]) -> Result<f64> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer state for {} parameters, got {} gradients for {}",
                self.m.len(),
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads.iter()) {
            if p.value.shape() != g.shape() {
                return Err(Error::shape("adam gradient", p.value.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Divergence(format!("non-finite gradient for parameter {}", p.name)));
            }
        }
        let norm = global_norm(grads);
        if let Some(max) = self.config.clip_norm {
            if norm > max {
                let c = S::lit(max / (norm + 1e-6));
                grads.iter_mut().for_each(|g| g.scale_in_place(c));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr, beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (S::lit(beta1), S::lit(beta2));
        let (one_b1, one_b2) = (S::lit(1.0 - beta1), S::lit(1.0 - beta2));
        let step_size = S::lit(lr / bc1);
        let (inv_sqrt_bc2, eps) = (S::lit(1.0 / bc2.sqrt()), S::lit(eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            let pd = p.value.data_mut();
            for (((x, &g), m), v) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *x = *x - step_size * *m / ((*v).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(norm)
    }
}

pub fn global_norm<S: Scalar>(grads: &[Tensor<S>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    shapes: Vec<Vec<usize>>,
    t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        AdamState {
            config,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
            t: 0,
        }
    }

    /// Number of completed steps.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected Adam update using each tensor's `grad` buffer.
    /// Tensors without a gradient buffer are treated as having zero gradient.
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        if !(self.config.lr > 0.0) {
            return Err(TensorError::contract("adam_step", "learning rate must be positive"));
        }
        if params.len() != self.m.len() {
            return Err(TensorError::StateCorruption {
                index: params.len().min(self.m.len()),
                state: vec![self.m.len()],
                param: vec![params.len()],
            });
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != self.shapes[i].as_slice() {
                return Err(TensorError::StateCorruption {
                    index: i,
                    state: self.shapes[i].clone(),
                    param: p.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        let one = T::one();
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = p.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam update to `params` from their gradient buffers.
pub fn adam_step<T: Real>(params: &mut [Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    state.step(params)
}

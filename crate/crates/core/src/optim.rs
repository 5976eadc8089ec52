//! Named parameters, gradient accumulators and the Adam optimizer.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{input_err, protocol_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<f64>,
    /// Adam first and second moments.
    pub m: Tensor<f64>,
    pub v: Tensor<f64>,
    /// Buffers (running statistics) are stored here but never updated by the
    /// optimizer and never all-reduced.
    pub trainable: bool,
}

pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> usize {
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: Tensor::zeros(r, c),
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
            trainable,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.params[id]
    }

    pub fn value(&self, id: usize) -> &Tensor<T> {
        &self.params[id].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: usize, g: &Tensor<f64>) -> Result<()> {
        let p = &mut self.params[id];
        p.grad.check_same_shape(g, &p.name)?;
        p.grad.add_assign(g);
        Ok(())
    }

    /// Trainable gradients concatenated in registration order.
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| p.trainable) {
            out.extend_from_slice(p.grad.data());
        }
        out
    }

    pub fn set_flat_grads(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = self
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.grad.len())
            .sum();
        if flat.len() != expected {
            return Err(protocol_err!(
                "reduced gradient buffer has {} entries, expected {expected}",
                flat.len()
            ));
        }
        let mut off = 0;
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let n = p.grad.len();
            p.grad.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// One Adam update of every trainable parameter with its current gradient.
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let g = p.grad.data();
            let m = p.m.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = p.v.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w = T::of_f64(w.as_f64() - lr * mhat / (vhat.sqrt() + cfg.eps));
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step decay: `base * factor^(epoch / step_epochs)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub step_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 0.01,
            factor: 0.3,
            step_epochs: 30,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.step_epochs == 0 {
            return self.base;
        }
        self.base * self.factor.powi((epoch / self.step_epochs) as i32)
    }
}

/// Glorot-uniform matrix drawn from a stream determined by `(seed, stream)`.
pub fn glorot_uniform<T: Scalar>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    seed: u64,
    stream: u64,
) -> Result<Tensor<T>> {
    if fan_in + fan_out == 0 {
        return Err(input_err!("glorot init with zero fan"));
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let dist = Uniform::new_inclusive(-bound, bound);
    let data = (0..rows * cols)
        .map(|_| T::of_f64(dist.sample(&mut rng)))
        .collect();
    Tensor::new(rows, cols, data)
}

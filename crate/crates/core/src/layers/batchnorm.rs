//! Batch normalization over rows spread across workers.

use crate::autodiff::{BatchNormStats, Reducer, Tape};
use crate::error::{input_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Running statistics used at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub eps: f64,
    pub momentum: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        BatchNormState {
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, stats: &BatchNormStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }

    /// Normalizes with the running statistics.
    pub fn eval_forward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let f = x.cols();
        if self.running_mean.len() != f || gamma.shape() != (1, f) || beta.shape() != (1, f) {
            return Err(input_err!("batchnorm width mismatch"));
        }
        let mut out = Tensor::zeros(x.rows(), f);
        for r in 0..x.rows() {
            for c in 0..f {
                let h = (x.get(r, c).as_f64() - self.running_mean[c])
                    / (self.running_var[c] + self.eps).sqrt();
                out.set(
                    r,
                    c,
                    T::of_f64(h * gamma.get(0, c).as_f64() + beta.get(0, c).as_f64()),
                );
            }
        }
        Ok(out)
    }
}

/// Output and global statistics of [`dist_batchnorm_forward`].
#[derive(Debug, Clone)]
pub struct BatchNormOutput<T: Scalar> {
    pub out: Tensor<T>,
    pub stats: BatchNormStats,
}

/// Input and affine gradients of [`dist_batchnorm_backward`].
#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub dx: Tensor<f64>,
    pub dgamma: Tensor<f64>,
    pub dbeta: Tensor<f64>,
}

/// Normalizes this worker's rows with the global mean and population
/// variance gathered through `reducer`.
pub fn dist_batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    reducer: &mut dyn Reducer,
) -> Result<BatchNormOutput<T>> {
    let mut tape = Tape::new();
    let (vx, vg, vb) = (
        tape.constant(x.clone())?,
        tape.param(gamma.clone(), 0)?,
        tape.param(beta.clone(), 1)?,
    );
    let (y, stats) = tape.batchnorm(vx, vg, vb, eps, reducer)?;
    Ok(BatchNormOutput {
        out: tape.value(y).clone(),
        stats,
    })
}

/// Gradients of [`dist_batchnorm_forward`] for upstream gradient `g`. The
/// affine gradients are this worker's share; the input gradient already
/// accounts for every worker's rows.
pub fn dist_batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    g: &Tensor<f64>,
    reducer: &mut dyn Reducer,
) -> Result<BatchNormGrads> {
    let mut tape = Tape::new();
    let vx = tape.param(x.clone(), 2)?;
    let (vg, vb) = (tape.param(gamma.clone(), 0)?, tape.param(beta.clone(), 1)?);
    let (y, _) = tape.batchnorm(vx, vg, vb, eps, reducer)?;
    let mut grads = tape.backward(&[(y, g.clone())], reducer)?;
    let take = |m: &mut std::collections::BTreeMap<usize, Tensor<f64>>,
                id: usize,
                r: usize,
                c: usize| { m.remove(&id).unwrap_or_else(|| Tensor::zeros(r, c)) };
    let f = x.cols();
    Ok(BatchNormGrads {
        dx: take(&mut grads.params, 2, x.rows(), f),
        dgamma: take(&mut grads.params, 0, 1, f),
        dbeta: take(&mut grads.params, 1, 1, f),
    })
}

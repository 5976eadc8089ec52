use std::collections::BTreeMap;
use std::sync::Arc;

use super::Reducer;
use crate::error::{input_err, Error, Result};
use crate::rng::DropoutKey;
use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_nt, matmul_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Node {
    Constant,
    Param {
        id: usize,
    },
    Detached {
        tag: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        rows: Option<Arc<Vec<bool>>>,
    },
    Add {
        a: Var,
        b: Var,
    },
    MulScalar {
        x: Var,
        s: f64,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Elu {
        x: Var,
        alpha: f64,
    },
    Dropout {
        x: Var,
        keep: Vec<bool>,
        scale: f64,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<f64>,
        inv_std: Vec<f64>,
        global_rows: f64,
    },
    Nll {
        logits: Var,
        dlogits: Tensor<f64>,
    },
}

/// Global batch statistics computed by [`Tape::batchnorm`].
#[derive(Debug, Clone)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub rows: f64,
}

/// Append-only record of forward operations.
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    nodes: Vec<Node>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by recorded values.
    pub fn value_bytes(&self) -> usize {
        self.values.iter().map(|v| v.nbytes()).sum()
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Turns recording off or on. Pushing while off is a contract violation.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    fn push(&mut self, node: Node, value: Tensor<T>) -> Result<Var> {
        if !self.recording {
            return Err(Error::Contract(
                "tape recording is disabled during aggregation".into(),
            ));
        }
        self.nodes.push(node);
        self.values.push(value);
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(input_err!("variable {} is not on this tape", v.0));
        }
        Ok(())
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(Node::Constant, value)
    }

    /// Leaf whose gradient is reported under `id` by [`Backward::into_gradients`].
    pub fn param(&mut self, value: Tensor<T>, id: usize) -> Result<Var> {
        self.push(Node::Param { id }, value)
    }

    /// Leaf whose value was computed off-tape. The backward sweep stops here
    /// and returns the accumulated gradient together with `tag`.
    pub fn detached(&mut self, value: Tensor<T>, tag: usize) -> Result<Var> {
        self.push(Node::Detached { tag }, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_rows(a, b, None)
    }

    /// Product where only rows flagged in `rows` are computed; the others are
    /// constant zero.
    pub fn matmul_rows(&mut self, a: Var, b: Var, rows: Option<Arc<Vec<bool>>>) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = matmul_acc(
            &self.values[a.0],
            &self.values[b.0],
            rows.as_deref().map(|r| &r[..]),
        )?;
        self.push(Node::MatMul { a, b, rows }, out.cast())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        va.check_same_shape(vb, "add")?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| T::of_f64(x.as_f64() + y.as_f64()))
            .collect();
        let out = Tensor::new(va.rows(), va.cols(), data)?;
        self.push(Node::Add { a, b }, out)
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.values[x.0].map(|v| T::of_f64(v.as_f64() * s));
        self.push(Node::MulScalar { x, s }, out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.values[x.0].map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Node::Relu { x }, out)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.values[x.0].map(|v| T::of_f64(leaky(v.as_f64(), slope)));
        self.push(Node::LeakyRelu { x, slope }, out)
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.values[x.0].map(|v| {
            let v = v.as_f64();
            T::of_f64(if v > 0.0 { v } else { alpha * v.exp_m1() })
        });
        self.push(Node::Elu { x, alpha }, out)
    }

    /// Inverted dropout with a counter-based mask: element `(r, c)` is kept
    /// iff the draw for `(node_ids[r], c)` under `key` is `>= p`; kept values
    /// are scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: f64, key: DropoutKey, node_ids: &[u32]) -> Result<Var> {
        self.check(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(input_err!("dropout probability {p} outside [0, 1)"));
        }
        let vx = &self.values[x.0];
        if node_ids.len() != vx.rows() {
            return Err(input_err!(
                "dropout: {} node ids for {} rows",
                node_ids.len(),
                vx.rows()
            ));
        }
        if p == 0.0 {
            let out = vx.clone();
            return self.push(
                Node::Dropout {
                    x,
                    keep: vec![true; out.len()],
                    scale: 1.0,
                },
                out,
            );
        }
        let keep = key.keep_mask(node_ids, vx.cols(), p);
        let scale = 1.0 / (1.0 - p);
        let data = vx
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| {
                if k {
                    T::of_f64(v.as_f64() * scale)
                } else {
                    T::zero()
                }
            })
            .collect();
        let out = Tensor::new(vx.rows(), vx.cols(), data)?;
        self.push(Node::Dropout { x, keep, scale }, out)
    }

    /// Batch normalization over rows that may be spread across workers.
    ///
    /// Column sums, sums of squares and the row count are all-reduced through
    /// `reducer`, so every worker normalizes with the global population
    /// statistics. The backward pass all-reduces the two summary gradient
    /// terms the same way.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        reducer: &mut dyn Reducer,
    ) -> Result<(Var, BatchNormStats)> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let vx = &self.values[x.0];
        let (n, f) = vx.shape();
        let (g, b) = (&self.values[gamma.0], &self.values[beta.0]);
        if g.shape() != (1, f) || b.shape() != (1, f) {
            return Err(input_err!("batchnorm affine parameters must be 1x{f}"));
        }
        let mut sums = vec![0.0; 2 * f + 1];
        for r in 0..n {
            for (c, &v) in vx.row(r).iter().enumerate() {
                let v = v.as_f64();
                sums[c] += v;
                sums[f + c] += v * v;
            }
        }
        sums[2 * f] = n as f64;
        reducer.allreduce_sum(&mut sums)?;
        let total = sums[2 * f];
        if total < 1.0 {
            return Err(input_err!("batchnorm over zero rows"));
        }
        let mean: Vec<f64> = (0..f).map(|c| sums[c] / total).collect();
        let var: Vec<f64> = (0..f)
            .map(|c| (sums[f + c] / total - mean[c] * mean[c]).max(0.0))
            .collect();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::<f64>::zeros(n, f);
        let mut out = Tensor::<T>::zeros(n, f);
        for r in 0..n {
            for c in 0..f {
                let h = (vx.get(r, c).as_f64() - mean[c]) * inv_std[c];
                xhat.set(r, c, h);
                out.set(
                    r,
                    c,
                    T::of_f64(h * g.get(0, c).as_f64() + b.get(0, c).as_f64()),
                );
            }
        }
        let stats = BatchNormStats {
            mean,
            var,
            rows: total,
        };
        let v = self.push(
            Node::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                global_rows: total,
            },
            out,
        )?;
        Ok((v, stats))
    }

    /// Negative log-likelihood summed over `rows` and divided by
    /// `normalizer` (the global labeled count when rows are distributed).
    /// The recorded value is this worker's 1x1 share of the loss.
    pub fn nll_loss(
        &mut self,
        logits: Var,
        labels: &[usize],
        rows: &[usize],
        normalizer: f64,
    ) -> Result<Var> {
        self.check(logits)?;
        let (loss, dlogits) =
            nll_forward_backward(&self.values[logits.0], labels, rows, normalizer)?;
        self.push(
            Node::Nll { logits, dlogits },
            Tensor::new(1, 1, vec![T::of_f64(loss)])?,
        )
    }

    /// Starts a backward sweep from the end of the tape.
    pub fn backward_sweep(&self) -> Backward<'_, T> {
        Backward {
            tape: self,
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            cursor: self.nodes.len(),
        }
    }

    /// Runs a full sweep. Gradients arriving at detached leaves are returned
    /// in [`Gradients::detached`] and not propagated further.
    pub fn backward(
        &self,
        seeds: &[(Var, Tensor<f64>)],
        reducer: &mut dyn Reducer,
    ) -> Result<Gradients> {
        let mut sweep = self.backward_sweep();
        for (v, g) in seeds {
            sweep.seed(*v, g.clone())?;
        }
        let mut detached = BTreeMap::new();
        while let Some((_, tag, g)) = sweep.run(reducer)? {
            detached.insert(tag, g);
        }
        let mut grads = sweep.into_gradients();
        grads.detached = detached;
        Ok(grads)
    }
}

#[inline]
fn leaky(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

pub(crate) fn nll_forward_backward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    rows: &[usize],
    normalizer: f64,
) -> Result<(f64, Tensor<f64>)> {
    if normalizer <= 0.0 {
        return Err(input_err!("loss mask selects no rows"));
    }
    if labels.len() != rows.len() {
        return Err(input_err!(
            "{} labels for {} rows",
            labels.len(),
            rows.len()
        ));
    }
    let c = logits.cols();
    let mut dlogits = Tensor::<f64>::zeros(logits.rows(), c);
    let mut total = 0.0;
    for (&r, &label) in rows.iter().zip(labels) {
        if r >= logits.rows() || label >= c {
            return Err(input_err!("row {r} / label {label} out of range"));
        }
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut denom = 0.0;
        for v in row {
            denom += (v.as_f64() - max).exp();
        }
        let lse = max + denom.ln();
        total += lse - row[label].as_f64();
        let drow = dlogits.row_mut(r);
        for (k, v) in row.iter().enumerate() {
            let p = (v.as_f64() - max).exp() / denom;
            drow[k] = (p - if k == label { 1.0 } else { 0.0 }) / normalizer;
        }
    }
    Ok((total / normalizer, dlogits))
}

/// Gradients collected from a finished sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    /// Parameter id → gradient.
    pub params: BTreeMap<usize, Tensor<f64>>,
    /// Detached tag → gradient that reached the detached leaf.
    pub detached: BTreeMap<usize, Tensor<f64>>,
}

/// An in-progress reverse sweep. Nodes are visited in strictly decreasing
/// order; a node can only be seeded before the sweep has passed it.
pub struct Backward<'a, T> {
    tape: &'a Tape<T>,
    grads: Vec<Option<Tensor<f64>>>,
    cursor: usize,
}

impl<'a, T: Scalar> Backward<'a, T> {
    /// Adds `grad` to the gradient of `v`.
    pub fn seed(&mut self, v: Var, grad: Tensor<f64>) -> Result<()> {
        self.tape.check(v)?;
        if v.0 >= self.cursor {
            return Err(Error::Contract(format!(
                "variable {} was already passed by the backward sweep",
                v.0
            )));
        }
        self.tape.values[v.0].check_same_shape(&grad, "backward seed")?;
        self.accumulate(v, grad);
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn accumulate(&mut self, v: Var, grad: Tensor<f64>) {
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

    /// Sweeps until the next detached leaf carrying a gradient, returning
    /// `(var, tag, gradient)`, or `None` once the start of the tape is reached.
    pub fn run(&mut self, reducer: &mut dyn Reducer) -> Result<Option<(Var, usize, Tensor<f64>)>> {
        while self.cursor > 0 {
            self.cursor -= 1;
            let i = self.cursor;
            if let Node::Detached { tag } = self.tape.nodes[i] {
                if let Some(g) = self.grads[i].take() {
                    return Ok(Some((Var(i), tag, g)));
                }
                continue;
            }
            let is_leaf = matches!(self.tape.nodes[i], Node::Constant | Node::Param { .. });
            if is_leaf {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, g, reducer)?;
        }
        Ok(None)
    }

    fn propagate(&mut self, i: usize, g: Tensor<f64>, reducer: &mut dyn Reducer) -> Result<()> {
        let tape = self.tape;
        match &tape.nodes[i] {
            Node::Constant | Node::Param { .. } | Node::Detached { .. } => {}
            Node::MatMul { a, b, rows } => {
                let mut g = g;
                if let Some(mask) = rows {
                    for (r, &on) in mask.iter().enumerate() {
                        if !on {
                            g.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                }
                let da = matmul_nt(&g, &tape.values[b.0])?;
                let db = matmul_tn(&tape.values[a.0], &g)?;
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Node::Add { a, b } => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g);
            }
            Node::MulScalar { x, s } => {
                let s = *s;
                self.accumulate(*x, g.map(|v| v * s));
            }
            Node::Relu { x } => {
                let d = elementwise(
                    &g,
                    &tape.values[x.0],
                    |gv, xv| if xv >= 0.0 { gv } else { 0.0 },
                );
                self.accumulate(*x, d);
            }
            Node::LeakyRelu { x, slope } => {
                let s = *slope;
                let d = elementwise(
                    &g,
                    &tape.values[x.0],
                    |gv, xv| if xv >= 0.0 { gv } else { gv * s },
                );
                self.accumulate(*x, d);
            }
            Node::Elu { x, alpha } => {
                let a = *alpha;
                let d = elementwise(&g, &tape.values[x.0], |gv, xv| {
                    if xv >= 0.0 {
                        gv
                    } else {
                        gv * a * xv.exp()
                    }
                });
                self.accumulate(*x, d);
            }
            Node::Dropout { x, keep, scale } => {
                let mut d = g;
                for (v, &k) in d.data_mut().iter_mut().zip(keep) {
                    *v = if k { *v * scale } else { 0.0 };
                }
                self.accumulate(*x, d);
            }
            Node::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                global_rows,
            } => {
                let (n, f) = xhat.shape();
                let gv = &tape.values[gamma.0];
                let mut dgamma = Tensor::<f64>::zeros(1, f);
                let mut dbeta = Tensor::<f64>::zeros(1, f);
                let mut sums = vec![0.0; 2 * f];
                for r in 0..n {
                    for c in 0..f {
                        let dy = g.get(r, c);
                        let h = xhat.get(r, c);
                        dgamma.data_mut()[c] += dy * h;
                        dbeta.data_mut()[c] += dy;
                        let dh = dy * gv.get(0, c).as_f64();
                        sums[c] += dh;
                        sums[f + c] += dh * h;
                    }
                }
                reducer.allreduce_sum(&mut sums)?;
                let mut dx = Tensor::<f64>::zeros(n, f);
                for r in 0..n {
                    for c in 0..f {
                        let dh = g.get(r, c) * gv.get(0, c).as_f64();
                        let h = xhat.get(r, c);
                        dx.set(
                            r,
                            c,
                            inv_std[c]
                                * (dh - sums[c] / global_rows - h * sums[f + c] / global_rows),
                        );
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*gamma, dgamma);
                self.accumulate(*beta, dbeta);
            }
            Node::Nll { logits, dlogits } => {
                let s = g.get(0, 0);
                self.accumulate(*logits, dlogits.map(|v| v * s));
            }
        }
        Ok(())
    }

    /// Finishes the sweep (running it to the start if needed) and returns the
    /// parameter gradients.
    pub fn into_gradients(mut self) -> Gradients {
        let mut out = Gradients::default();
        for (i, node) in self.tape.nodes.iter().enumerate() {
            if let Node::Param { id } = node {
                if let Some(g) = self.grads[i].take() {
                    match out.params.get_mut(id) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            out.params.insert(*id, g);
                        }
                    }
                }
            }
        }
        out
    }
}

fn elementwise<T: Scalar>(
    g: &Tensor<f64>,
    x: &Tensor<T>,
    f: impl Fn(f64, f64) -> f64,
) -> Tensor<f64> {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .map(|(&gv, &xv)| f(gv, xv.as_f64()))
        .collect();
    Tensor::new(g.rows(), g.cols(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::super::{log_softmax_nll, LocalReducer};
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    /// Central finite differences of `f` at `x`.
    fn finite_diff(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let h = 1e-6;
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            out.data_mut()[k] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn sum_all(tape: &Tape<f64>, v: Var) -> Tensor<f64> {
        let (r, c) = tape.value(v).shape();
        Tensor::filled(r, c, 1.0)
    }

    #[test]
    fn matmul_backward_matches_closed_form() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[&[1.0, 2.0]]), 0).unwrap();
        let b = tape.param(t(&[&[3.0], &[4.0]]), 1).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let seed = sum_all(&tape, c);
        let grads = tape.backward(&[(c, seed)], &mut LocalReducer).unwrap();
        assert_eq!(grads.params[&0], t(&[&[3.0, 4.0]]));
        assert_eq!(grads.params[&1], t(&[&[1.0], &[2.0]]));
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let a0 = t(&[&[0.3, -1.2, 0.5], &[2.0, 0.1, -0.7]]);
        let b0 = t(&[&[1.0, -0.5], &[0.25, 0.75], &[-1.5, 2.0]]);
        let w = t(&[&[0.9, -0.4], &[0.2, 1.1]]);
        let loss = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let c = a.matmul(b).unwrap();
            c.data()
                .iter()
                .zip(w.data())
                .map(|(x, y)| x * y)
                .sum::<f64>()
        };
        let mut tape = Tape::<f64>::new();
        let a = tape.param(a0.clone(), 0).unwrap();
        let b = tape.param(b0.clone(), 1).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let g = tape.backward(&[(c, w.clone())], &mut LocalReducer).unwrap();
        let fa = finite_diff(&a0, &|x| loss(x, &b0));
        let fb = finite_diff(&b0, &|x| loss(&a0, x));
        assert!(crate::tensor::rel_diff(&g.params[&0], &fa) < 1e-6);
        assert!(crate::tensor::rel_diff(&g.params[&1], &fb) < 1e-6);
    }

    #[test]
    fn shared_leaf_sums_both_paths() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[&[1.5, -2.0]]), 0).unwrap();
        let y1 = tape.mul_scalar(x, 2.0).unwrap();
        let y2 = tape.mul_scalar(x, 3.0).unwrap();
        let y = tape.add(y1, y2).unwrap();
        let grads = tape
            .backward(&[(y, Tensor::filled(1, 2, 1.0))], &mut LocalReducer)
            .unwrap();
        assert_eq!(grads.params[&0], t(&[&[5.0, 5.0]]));
    }

    #[test]
    fn zero_seed_gives_zero_grads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[&[1.0, 2.0]]), 0).unwrap();
        let w = tape.param(t(&[&[1.0], &[-1.0]]), 1).unwrap();
        let y = tape.matmul(x, w).unwrap();
        let y = tape.elu(y, 1.0).unwrap();
        let grads = tape
            .backward(&[(y, Tensor::zeros(1, 1))], &mut LocalReducer)
            .unwrap();
        assert!(grads.params.values().all(|g| g.max_abs() == 0.0));
    }

    #[test]
    fn seeding_unknown_var_is_input_error() {
        let tape = Tape::<f64>::new();
        let mut sweep = tape.backward_sweep();
        assert!(matches!(
            sweep.seed(Var(3), Tensor::zeros(1, 1)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn leaky_relu_values_and_subgradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[&[-2.0, 0.0, 3.0]]), 0).unwrap();
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert!((tape.value(y).get(0, 0) + 0.4).abs() < 1e-15);
        let grads = tape
            .backward(&[(y, Tensor::filled(1, 3, 1.0))], &mut LocalReducer)
            .unwrap();
        // Positive branch at exactly zero.
        assert_eq!(grads.params[&0], t(&[&[0.2, 1.0, 1.0]]));
    }

    #[test]
    fn relu_blocks_negative_inputs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[&[-1.0, 0.0]]), 0).unwrap();
        let y = tape.relu(x).unwrap();
        let grads = tape
            .backward(&[(y, t(&[&[5.0, 5.0]]))], &mut LocalReducer)
            .unwrap();
        assert_eq!(grads.params[&0], t(&[&[0.0, 5.0]]));
    }

    #[test]
    fn elementwise_backward_matches_finite_differences() {
        let x0 = t(&[&[-1.3, 0.4, 2.2], &[0.7, -0.05, -3.0]]);
        let w = t(&[&[0.5, -1.0, 2.0], &[1.5, 0.25, -0.75]]);
        type Op = fn(&mut Tape<f64>, Var) -> Var;
        let ops: [(Op, fn(f64) -> f64); 4] = [
            (|t, v| t.relu(v).unwrap(), |x| x.max(0.0)),
            (
                |t, v| t.leaky_relu(v, 0.2).unwrap(),
                |x| if x >= 0.0 { x } else { 0.2 * x },
            ),
            (
                |t, v| t.elu(v, 1.0).unwrap(),
                |x| if x > 0.0 { x } else { x.exp_m1() },
            ),
            (|t, v| t.mul_scalar(v, -1.7).unwrap(), |x| -1.7 * x),
        ];
        for (op, f) in ops {
            let mut tape = Tape::<f64>::new();
            let x = tape.param(x0.clone(), 0).unwrap();
            let y = op(&mut tape, x);
            let g = tape.backward(&[(y, w.clone())], &mut LocalReducer).unwrap();
            let fd = finite_diff(&x0, &|x| {
                x.data().iter().zip(w.data()).map(|(&v, &k)| f(v) * k).sum()
            });
            assert!(crate::tensor::rel_diff(&g.params[&0], &fd) < 1e-6);
        }
    }

    #[test]
    fn dropout_zero_is_identity_and_bad_p_rejected() {
        let mut tape = Tape::<f32>::new();
        let x0 = Tensor::<f32>::from_rows(&[&[1.0, -2.0], &[3.5, 4.0]]);
        let x = tape.constant(x0.clone()).unwrap();
        let key = DropoutKey {
            seed: 1,
            layer: 0,
            epoch: 0,
        };
        let y = tape.dropout(x, 0.0, key, &[0, 1]).unwrap();
        assert_eq!(tape.value(y), &x0);
        assert!(matches!(
            tape.dropout(x, 1.0, key, &[0, 1]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            tape.dropout(x, -0.1, key, &[0, 1]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn dropout_scales_kept_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::filled(50, 4, 1.0), 0).unwrap();
        let ids: Vec<u32> = (0..50).collect();
        let y = tape
            .dropout(
                x,
                0.5,
                DropoutKey {
                    seed: 9,
                    layer: 2,
                    epoch: 4,
                },
                &ids,
            )
            .unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
        let g = tape
            .backward(&[(y, Tensor::filled(50, 4, 1.0))], &mut LocalReducer)
            .unwrap();
        assert_eq!(&g.params[&0], tape.value(y));
    }

    #[test]
    fn nll_of_uniform_logits_is_ln2() {
        let (loss, _) = log_softmax_nll(&t(&[&[0.0, 0.0]]), &[0], &[0], 1.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn nll_is_stable_for_huge_logits() {
        let (loss, d) = log_softmax_nll(&t(&[&[1000.0, 0.0]]), &[0], &[0], 1.0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(d.all_finite());
    }

    #[test]
    fn nll_masked_confident_row_goes_to_zero() {
        let logits = t(&[&[50.0, -50.0], &[0.0, 3.0]]);
        let (loss, d) = log_softmax_nll(&logits, &[0], &[0], 1.0).unwrap();
        assert!(loss < 1e-20);
        assert_eq!(d.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn nll_empty_mask_rejected() {
        assert!(matches!(
            log_softmax_nll(&t(&[&[0.0, 0.0]]), &[], &[], 0.0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn nll_backward_matches_finite_differences() {
        let x0 = t(&[&[0.2, -1.0, 0.7], &[1.5, 0.3, -0.4], &[0.0, 0.1, 0.2]]);
        let rows = [0, 2];
        let labels = [2, 0];
        let mut tape = Tape::<f64>::new();
        let x = tape.param(x0.clone(), 0).unwrap();
        let l = tape.nll_loss(x, &labels, &rows, 2.0).unwrap();
        let g = tape
            .backward(&[(l, Tensor::filled(1, 1, 1.0))], &mut LocalReducer)
            .unwrap();
        let fd = finite_diff(&x0, &|x| log_softmax_nll(x, &labels, &rows, 2.0).unwrap().0);
        assert!(crate::tensor::rel_diff(&g.params[&0], &fd) < 1e-6);
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let x0 = t(&[&[1.0, -0.5], &[3.0, 0.25], &[5.5, 2.0], &[7.0, -1.0]]);
        let g0 = t(&[&[1.3, 0.7]]);
        let b0 = t(&[&[0.1, -0.2]]);
        let w = t(&[&[0.3, -1.0], &[1.0, 0.5], &[-0.7, 0.2], &[0.4, 1.1]]);
        let f = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(x.clone()).unwrap();
            let gv = tape.constant(g.clone()).unwrap();
            let bv = tape.constant(b.clone()).unwrap();
            let (y, _) = tape.batchnorm(xv, gv, bv, 1e-5, &mut LocalReducer).unwrap();
            tape.value(y)
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut tape = Tape::<f64>::new();
        let xv = tape.param(x0.clone(), 0).unwrap();
        let gv = tape.param(g0.clone(), 1).unwrap();
        let bv = tape.param(b0.clone(), 2).unwrap();
        let (y, stats) = tape.batchnorm(xv, gv, bv, 1e-5, &mut LocalReducer).unwrap();
        assert!((stats.mean[0] - 4.125).abs() < 1e-12);
        let g = tape.backward(&[(y, w.clone())], &mut LocalReducer).unwrap();
        let fx = finite_diff(&x0, &|x| f(x, &g0, &b0));
        let fg = finite_diff(&g0, &|gg| f(&x0, gg, &b0));
        let fb = finite_diff(&b0, &|bb| f(&x0, &g0, bb));
        assert!(crate::tensor::rel_diff(&g.params[&0], &fx) < 1e-6);
        assert!(crate::tensor::rel_diff(&g.params[&1], &fg) < 1e-6);
        assert!(crate::tensor::rel_diff(&g.params[&2], &fb) < 1e-6);
    }

    #[test]
    fn sweep_stops_at_detached_leaf() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[&[2.0]]), 0).unwrap();
        let x = tape.constant(t(&[&[3.0]])).unwrap();
        let z = tape.matmul(x, w).unwrap();
        let acc = tape.detached(t(&[&[7.0]]), 42).unwrap();
        let y = tape.mul_scalar(acc, 4.0).unwrap();
        let mut sweep = tape.backward_sweep();
        sweep.seed(y, t(&[&[1.0]])).unwrap();
        let (v, tag, g) = sweep.run(&mut LocalReducer).unwrap().unwrap();
        assert_eq!((v, tag), (acc, 42));
        assert_eq!(g, t(&[&[4.0]]));
        // The caller pushes the gradient through the gap itself.
        sweep.seed(z, t(&[&[10.0]])).unwrap();
        assert!(sweep.run(&mut LocalReducer).unwrap().is_none());
        assert!(matches!(
            sweep.seed(y, t(&[&[1.0]])),
            Err(Error::Contract(_))
        ));
        let grads = sweep.into_gradients();
        assert_eq!(grads.params[&0], t(&[&[30.0]]));
    }

    #[test]
    fn pushing_while_paused_is_a_contract_violation() {
        let mut tape = Tape::<f64>::new();
        tape.set_recording(false);
        assert!(matches!(
            tape.constant(t(&[&[1.0]])),
            Err(Error::Contract(_))
        ));
        tape.set_recording(true);
        assert!(tape.constant(t(&[&[1.0]])).is_ok());
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape
                .constant(Tensor::from_rows(&[&[0.1, 0.2, -0.3], &[1.1, -2.2, 0.7]]))
                .unwrap();
            let w = tape
                .param(
                    Tensor::from_rows(&[&[0.5, -0.1], &[0.3, 0.9], &[-1.2, 0.4]]),
                    0,
                )
                .unwrap();
            let z = tape.matmul(x, w).unwrap();
            let z = tape
                .dropout(
                    z,
                    0.3,
                    DropoutKey {
                        seed: 3,
                        layer: 1,
                        epoch: 2,
                    },
                    &[4, 9],
                )
                .unwrap();
            let z = tape.elu(z, 1.0).unwrap();
            let l = tape.nll_loss(z, &[1, 0], &[0, 1], 2.0).unwrap();
            let g = tape
                .backward(&[(l, Tensor::filled(1, 1, 1.0))], &mut LocalReducer)
                .unwrap();
            (tape.value(l).clone(), g.params[&0].clone())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.data()[0].to_bits(), l2.data()[0].to_bits());
        assert!(g1
            .data()
            .iter()
            .zip(g2.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

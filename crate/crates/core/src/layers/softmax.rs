//! Streaming softmax-weighted sums with a running maximum.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-slot running state of a softmax-weighted sum. A slot is one
/// `(destination, head)` pair; `width` is the value width per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningSoftmaxState {
    width: usize,
    /// Running maximum logit per slot (`-inf` before any fold).
    pub max: Vec<f64>,
    pub den: Vec<f64>,
    /// Numerators, `slots × width`.
    pub num: Vec<f64>,
}

impl RunningSoftmaxState {
    pub fn new(slots: usize, width: usize) -> Self {
        RunningSoftmaxState {
            width,
            max: vec![f64::NEG_INFINITY; slots],
            den: vec![0.0; slots],
            num: vec![0.0; slots * width],
        }
    }

    pub fn slots(&self) -> usize {
        self.max.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Folds one chunk of logits and the matching value rows into `slot`.
    pub fn fold<'a, V: Scalar>(
        &mut self,
        slot: usize,
        logits: &[f64],
        values: impl Fn(usize) -> &'a [V],
    ) -> Result<()> {
        if logits.is_empty() {
            return Ok(());
        }
        let mut chunk_max = f64::NEG_INFINITY;
        for (k, &e) in logits.iter().enumerate() {
            if !e.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite attention logit {e} at slot {slot}, chunk entry {k}"
                )));
            }
            chunk_max = chunk_max.max(e);
        }
        let old = self.max[slot];
        let new = old.max(chunk_max);
        let w = self.width;
        let num = &mut self.num[slot * w..(slot + 1) * w];
        if old != new && old != f64::NEG_INFINITY {
            let scale = (old - new).exp();
            self.den[slot] *= scale;
            num.iter_mut().for_each(|x| *x *= scale);
        }
        self.max[slot] = new;
        for (k, &e) in logits.iter().enumerate() {
            let p = (e - new).exp();
            self.den[slot] += p;
            let v = values(k);
            debug_assert_eq!(v.len(), w);
            for (n, &x) in num.iter_mut().zip(v) {
                *n += p * x.as_f64();
            }
        }
        Ok(())
    }

    /// Combines another partial state over a disjoint set of entries.
    pub fn merge(&mut self, other: &RunningSoftmaxState) {
        let w = self.width;
        for s in 0..self.slots() {
            let (ma, mb) = (self.max[s], other.max[s]);
            if mb == f64::NEG_INFINITY {
                continue;
            }
            let m = ma.max(mb);
            let sa = if ma == f64::NEG_INFINITY {
                0.0
            } else {
                (ma - m).exp()
            };
            let sb = (mb - m).exp();
            self.den[s] = self.den[s] * sa + other.den[s] * sb;
            for c in 0..w {
                self.num[s * w + c] = self.num[s * w + c] * sa + other.num[s * w + c] * sb;
            }
            self.max[s] = m;
        }
    }

    /// `num / den` for `slot`, or zeros if nothing was folded.
    pub fn output(&self, slot: usize) -> Vec<f64> {
        let w = self.width;
        let den = self.den[slot];
        let num = &self.num[slot * w..(slot + 1) * w];
        if den > 0.0 {
            num.iter().map(|x| x / den).collect()
        } else {
            vec![0.0; w]
        }
    }
}

/// Folds `logits` / `values` (rows of equal width) into `slot` of `state`.
pub fn running_softmax_fold<V: Scalar>(
    state: &mut RunningSoftmaxState,
    slot: usize,
    logits: &[f64],
    values: &[&[V]],
) -> Result<()> {
    if logits.len() != values.len() {
        return Err(crate::error::input_err!(
            "{} logits for {} value rows",
            logits.len(),
            values.len()
        ));
    }
    state.fold(slot, logits, |k| values[k])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_softmax_sum(logits: &[f64], values: &[&[f64]]) -> Vec<f64> {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|e| (e - m).exp()).collect();
        let s: f64 = w.iter().sum();
        let mut out = vec![0.0; values[0].len()];
        for (wk, v) in w.iter().zip(values) {
            for (o, x) in out.iter_mut().zip(*v) {
                *o += wk / s * x;
            }
        }
        out
    }

    #[test]
    fn hand_example_one_or_two_chunks() {
        let v0 = [1.0, 0.0];
        let v1 = [0.0, 2.0];
        let want = [0.25, 1.5];
        let mut one = RunningSoftmaxState::new(1, 2);
        running_softmax_fold(&mut one, 0, &[0.0, 3f64.ln()], &[&v0[..], &v1[..]]).unwrap();
        let mut two = RunningSoftmaxState::new(1, 2);
        running_softmax_fold(&mut two, 0, &[0.0], &[&v0[..]]).unwrap();
        running_softmax_fold(&mut two, 0, &[3f64.ln()], &[&v1[..]]).unwrap();
        for (a, b) in one.output(0).iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in two.output(0).iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_chunk_is_plain_softmax() {
        let logits = [0.3, -1.0, 2.5, 0.0];
        let rows: Vec<[f64; 3]> = (0..4).map(|k| [k as f64, 1.0 - k as f64, 0.5]).collect();
        let vals: Vec<&[f64]> = rows.iter().map(|r| &r[..]).collect();
        let mut st = RunningSoftmaxState::new(1, 3);
        running_softmax_fold(&mut st, 0, &logits, &vals).unwrap();
        let want = plain_softmax_sum(&logits, &vals);
        for (a, b) in st.output(0).iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn decreasing_then_increasing_maxima() {
        let mut st = RunningSoftmaxState::new(1, 1);
        st.fold::<f64>(0, &[5.0], |_| &[1.0]).unwrap();
        st.fold::<f64>(0, &[-5.0], |_| &[3.0]).unwrap();
        st.fold::<f64>(0, &[9.0], |_| &[2.0]).unwrap();
        let want = plain_softmax_sum(&[5.0, -5.0, 9.0], &[&[1.0], &[3.0], &[2.0]]);
        assert!((st.output(0)[0] - want[0]).abs() < 1e-14);
    }

    #[test]
    fn nan_logit_is_rejected() {
        let mut st = RunningSoftmaxState::new(1, 1);
        let err = st.fold::<f64>(0, &[f64::NAN], |_| &[1.0]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn empty_slot_outputs_zero() {
        let st = RunningSoftmaxState::new(2, 3);
        assert_eq!(st.output(1), vec![0.0; 3]);
    }

    #[test]
    fn merge_matches_sequential_fold() {
        let logits = [1.0, 4.0, -2.0, 0.5];
        let vals = [[1.0], [2.0], [3.0], [4.0]];
        let mut seq = RunningSoftmaxState::new(1, 1);
        seq.fold::<f64>(0, &logits, |k| &vals[k]).unwrap();
        let mut a = RunningSoftmaxState::new(1, 1);
        a.fold::<f64>(0, &logits[..1], |k| &vals[k]).unwrap();
        let mut bc = RunningSoftmaxState::new(1, 1);
        bc.fold::<f64>(0, &logits[1..], |k| &vals[k + 1]).unwrap();
        a.merge(&bc);
        assert!((a.output(0)[0] - seq.output(0)[0]).abs() < 1e-12);
    }
}

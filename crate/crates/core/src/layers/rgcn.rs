//! Relational aggregation with basis-decomposed relation weights.
//!
//! `acc_i = Σ_r (1/|N_i^r|) Σ_{j∈N_i^r} h_j W_r` with `W_r = Σ_b a_rb V_b`.
//! A relation with no neighbors of `i` contributes nothing.

use std::sync::Arc;

use crate::error::{input_err, Error, Result};
use crate::graph::{Graph, ShardBlock};
use crate::runtime::{
    AggregateKind, AggregationState, Aggregator, AggregatorSpec, BlockGrads, MemoryTracker,
    MessageFn,
};
use crate::scalar::Scalar;
use crate::tensor::{dot, matmul_acc, matmul_nt, matmul_tn, Tensor};

/// `W_r = Σ_b coef[r][b] · V_b`.
pub fn basis_weights(bases: &[Tensor<f64>], coef: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
    if bases.is_empty() || coef.cols() != bases.len() {
        return Err(input_err!(
            "{} bases for a coefficient matrix of shape {:?}",
            bases.len(),
            coef.shape()
        ));
    }
    let (fi, fo) = bases[0].shape();
    if bases.iter().any(|v| v.shape() != (fi, fo)) {
        return Err(input_err!("basis tensors differ in shape"));
    }
    Ok((0..coef.rows())
        .map(|r| {
            let mut w = Tensor::<f64>::zeros(fi, fo);
            for (b, v) in bases.iter().enumerate() {
                let a = coef.get(r, b);
                for (x, y) in w.data_mut().iter_mut().zip(v.data()) {
                    *x += a * y;
                }
            }
            w
        })
        .collect())
}

/// Gradients of the bases and coefficients from per-relation weight
/// gradients: `dV_b = Σ_r a_rb dW_r`, `da_rb = <dW_r, V_b>`.
pub fn basis_grads(
    bases: &[Tensor<f64>],
    coef: &Tensor<f64>,
    d_weights: &[Tensor<f64>],
) -> (Vec<Tensor<f64>>, Tensor<f64>) {
    let mut dv: Vec<Tensor<f64>> = bases
        .iter()
        .map(|v| Tensor::zeros(v.rows(), v.cols()))
        .collect();
    let mut dcoef = Tensor::<f64>::zeros(coef.rows(), coef.cols());
    for (r, dw) in d_weights.iter().enumerate() {
        for (b, v) in bases.iter().enumerate() {
            let a = coef.get(r, b);
            for (x, y) in dv[b].data_mut().iter_mut().zip(dw.data()) {
                *x += a * y;
            }
            dcoef.set(r, b, dot(dw.data(), v.data()));
        }
    }
    (dv, dcoef)
}

/// Global per-relation in-degrees of `members`, laid out `member × R`.
pub fn relation_degrees(graph: &Graph, members: &[u32], relations: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; members.len() * relations];
    for (k, &v) in members.iter().enumerate() {
        let v = v as usize;
        for e in graph.indptr()[v]..graph.indptr()[v + 1] {
            let r = graph.relation(e) as usize;
            if r >= relations {
                return Err(input_err!("relation id {r} >= {relations}"));
            }
            out[k * relations + r] += 1.0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RelationalAggregator {
    in_width: usize,
    out_width: usize,
    degree: Arc<Vec<f64>>,
    bases: Vec<Tensor<f64>>,
    coef: Tensor<f64>,
    weights: Vec<Tensor<f64>>,
}

impl RelationalAggregator {
    /// `degree` holds the global per-relation in-degree of each local
    /// destination (`rows × R`).
    pub fn new(bases: Vec<Tensor<f64>>, coef: Tensor<f64>, degree: Arc<Vec<f64>>) -> Result<Self> {
        let weights = basis_weights(&bases, &coef)?;
        let r = coef.rows();
        if r == 0 || !degree.len().is_multiple_of(r) {
            return Err(input_err!(
                "relation degree table does not match {r} relations"
            ));
        }
        let (in_width, out_width) = bases[0].shape();
        Ok(RelationalAggregator {
            in_width,
            out_width,
            degree,
            bases,
            coef,
            weights,
        })
    }

    pub fn relations(&self) -> usize {
        self.coef.rows()
    }

    pub fn weights(&self) -> &[Tensor<f64>] {
        &self.weights
    }

    fn check<T: Scalar>(&self, block: &ShardBlock, src: &Tensor<T>, rows: usize) -> Result<()> {
        let nr = self.relations();
        if self.degree.len() != rows * nr {
            return Err(input_err!(
                "relation degrees cover {} rows, expected {rows}",
                self.degree.len() / nr
            ));
        }
        if let Some(e) = (0..block.num_edges()).find(|&e| block.relation(e) as usize >= nr) {
            return Err(input_err!("relation id {} >= {nr}", block.relation(e)));
        }
        if src.rows() != block.num_src() || src.cols() != self.in_width {
            return Err(Error::Protocol(format!(
                "source rows {:?} do not match block with {} sources",
                src.shape(),
                block.num_src()
            )));
        }
        Ok(())
    }

    /// Normalized neighbor sums of relation `r` restricted to this block,
    /// compacted to the destinations that have such an edge.
    fn relation_sums<T: Scalar>(
        &self,
        block: &ShardBlock,
        src: &Tensor<T>,
        r: usize,
    ) -> (Vec<usize>, Tensor<f64>) {
        let nr = self.relations();
        let mut rows = Vec::new();
        let mut data = Vec::new();
        for (i, range) in block.dst_runs() {
            let mut row: Option<Vec<f64>> = None;
            for e in range {
                if block.relation(e) as usize != r {
                    continue;
                }
                let acc = row.get_or_insert_with(|| vec![0.0; self.in_width]);
                for (a, x) in acc.iter_mut().zip(src.row(block.edges[e].1 as usize)) {
                    *a += x.as_f64();
                }
            }
            if let Some(mut row) = row {
                let deg = self.degree[i * nr + r];
                row.iter_mut().for_each(|x| *x /= deg);
                rows.push(i);
                data.extend(row);
            }
        }
        let n = rows.len();
        (
            rows,
            Tensor::new(n, self.in_width, data).expect("consistent row width"),
        )
    }
}

impl<T: Scalar> Aggregator<T> for RelationalAggregator {
    fn spec(&self) -> AggregatorSpec {
        AggregatorSpec {
            needs_input_rematerialization: true,
            message_fn: MessageFn::RelationProjection,
            aggregate: AggregateKind::RelationMean,
            has_theta: true,
        }
    }

    fn in_width(&self) -> usize {
        self.in_width
    }

    fn out_width(&self) -> usize {
        self.out_width
    }

    fn fold_block(
        &self,
        st: &mut AggregationState<T>,
        block: &ShardBlock,
        src: &Tensor<T>,
        _local_z: &Tensor<T>,
        _mem: &MemoryTracker,
    ) -> Result<()> {
        self.check(block, src, st.acc.rows())?;
        for r in 0..self.relations() {
            let (rows, s) = self.relation_sums(block, src, r);
            if rows.is_empty() {
                continue;
            }
            let p = matmul_acc(&s, &self.weights[r], None)?;
            for (k, &i) in rows.iter().enumerate() {
                st.acc.add_to_row(i, p.row(k));
            }
        }
        Ok(())
    }

    fn merge(&self, st: &mut AggregationState<T>, other: &AggregationState<T>) -> Result<()> {
        st.acc.check_same_shape(&other.acc, "partial aggregate")?;
        st.acc.add_assign(&other.acc);
        Ok(())
    }

    fn theta_buffers(&self) -> Vec<Tensor<f64>> {
        (0..self.relations())
            .map(|_| Tensor::zeros(self.in_width, self.out_width))
            .collect()
    }

    fn backward_block(
        &self,
        st: &AggregationState<T>,
        e_acc: &Tensor<f64>,
        block: &ShardBlock,
        src: Option<&Tensor<T>>,
        _local_z: &Tensor<T>,
        out: BlockGrads<'_>,
        _mem: &MemoryTracker,
    ) -> Result<()> {
        let src =
            src.ok_or_else(|| Error::Contract("relational backward needs source rows".into()))?;
        self.check(block, src, st.acc.rows())?;
        let nr = self.relations();
        for r in 0..nr {
            let (rows, s) = self.relation_sums(block, src, r);
            if rows.is_empty() {
                continue;
            }
            let g = e_acc.gather_rows(&rows);
            out.theta[r].add_assign(&matmul_tn(&s, &g)?);
            let gw = matmul_nt(&g, &self.weights[r])?;
            let mut k = 0;
            for (i, range) in block.dst_runs() {
                if k >= rows.len() || rows[k] != i {
                    continue;
                }
                let deg = self.degree[i * nr + r];
                let grow = gw.row(k);
                for e in range {
                    if block.relation(e) as usize != r {
                        continue;
                    }
                    let row = out.src.row_mut(block.edges[e].1 as usize);
                    for (x, y) in row.iter_mut().zip(grow) {
                        *x += y / deg;
                    }
                }
                k += 1;
            }
        }
        Ok(())
    }

    /// Returns `[dV_0, .., dV_{B-1}, d_coef]`.
    fn finalize_theta(&self, raw: Vec<Tensor<f64>>) -> Result<Vec<Tensor<f64>>> {
        let (mut dv, dcoef) = basis_grads(&self.bases, &self.coef, &raw);
        dv.push(dcoef);
        Ok(dv)
    }
}

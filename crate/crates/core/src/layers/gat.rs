//! Multi-head graph attention.
//!
//! Logits are `e_ji = LeakyReLU(a_dst·z_i + a_src·z_j)` per head, where the
//! attention parameter row of head `h` is `[a_dst | a_src]` (destination
//! half first). Heads are concatenated in the output.

use crate::error::{input_err, Error, Result};
use crate::graph::ShardBlock;
use crate::layers::softmax::RunningSoftmaxState;
use crate::runtime::{
    AggregateKind, AggregationState, Aggregator, AggregatorSpec, AllocTag, BlockGrads,
    MemoryTracker, MessageFn,
};
use crate::scalar::Scalar;
use crate::tensor::{dot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKernel {
    /// Per-destination logits computed and folded on the fly.
    Fused,
    /// All logits of a block materialized before the weighted sum.
    Materialized,
}

#[inline]
fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

/// Per-row, per-head partial scores against one half of `a`.
fn half_scores<T: Scalar>(
    z: &Tensor<T>,
    a: &Tensor<f64>,
    heads: usize,
    dim: usize,
    half: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.rows() * heads);
    for r in 0..z.rows() {
        let row = z.row(r);
        for h in 0..heads {
            let av = &a.row(h)[half * dim..(half + 1) * dim];
            out.push(dot(av, &row[h * dim..(h + 1) * dim]));
        }
    }
    out
}

fn check_params(a: &Tensor<f64>, heads: usize, dim: usize) -> Result<()> {
    if heads == 0 || dim == 0 {
        return Err(input_err!(
            "attention needs at least one head of nonzero width"
        ));
    }
    if a.shape() != (heads, 2 * dim) {
        return Err(input_err!(
            "attention vector shape {:?}, expected ({heads}, {})",
            a.shape(),
            2 * dim
        ));
    }
    Ok(())
}

/// Attention aggregation over shard blocks.
#[derive(Debug, Clone)]
pub struct AttentionAggregator {
    heads: usize,
    head_dim: usize,
    slope: f64,
    a: Tensor<f64>,
    kernel: AttentionKernel,
}

impl AttentionAggregator {
    pub fn new(
        a: Tensor<f64>,
        heads: usize,
        head_dim: usize,
        slope: f64,
        kernel: AttentionKernel,
    ) -> Result<Self> {
        check_params(&a, heads, head_dim)?;
        Ok(AttentionAggregator {
            heads,
            head_dim,
            slope,
            a,
            kernel,
        })
    }

    pub fn kernel(&self) -> AttentionKernel {
        self.kernel
    }

    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn check_shapes<T: Scalar>(
        &self,
        block: &ShardBlock,
        src: Option<&Tensor<T>>,
        local_z: &Tensor<T>,
    ) -> Result<()> {
        if local_z.cols() != self.width() {
            return Err(input_err!(
                "local z width {} != {}",
                local_z.cols(),
                self.width()
            ));
        }
        if let Some(src) = src {
            if src.cols() != self.width() || src.rows() != block.num_src() {
                return Err(Error::Protocol(format!(
                    "source rows {:?} do not match block with {} sources",
                    src.shape(),
                    block.num_src()
                )));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Aggregator<T> for AttentionAggregator {
    fn spec(&self) -> AggregatorSpec {
        AggregatorSpec {
            needs_input_rematerialization: true,
            message_fn: MessageFn::AttentionPair,
            aggregate: AggregateKind::AttentionSoftmax,
            has_theta: true,
        }
    }

    fn in_width(&self) -> usize {
        self.width()
    }

    fn out_width(&self) -> usize {
        self.width()
    }

    fn begin(&self, st: &mut AggregationState<T>, local_z: &Tensor<T>) -> Result<()> {
        st.scratch = vec![half_scores(local_z, &self.a, self.heads, self.head_dim, 0)];
        st.softmax_state = Some(RunningSoftmaxState::new(
            local_z.rows() * self.heads,
            self.head_dim,
        ));
        Ok(())
    }

    fn fold_block(
        &self,
        st: &mut AggregationState<T>,
        block: &ShardBlock,
        src: &Tensor<T>,
        local_z: &Tensor<T>,
        mem: &MemoryTracker,
    ) -> Result<()> {
        self.check_shapes(block, Some(src), local_z)?;
        if block.is_empty() {
            return Ok(());
        }
        let (hn, f) = (self.heads, self.head_dim);
        let s_src = half_scores(src, &self.a, hn, f, 1);
        let s_dst = &st.scratch[0];
        let ss = st
            .softmax_state
            .as_mut()
            .ok_or_else(|| Error::Contract("attention fold before begin".into()))?;
        let runs = block.dst_runs();
        let edges = &block.edges;
        match self.kernel {
            AttentionKernel::Fused => {
                let _lease = mem.lease(AllocTag::EdgeCoefficients, block.max_run() * 8);
                let mut logits = Vec::with_capacity(block.max_run());
                for (i, range) in runs {
                    for h in 0..hn {
                        logits.clear();
                        let sd = s_dst[i * hn + h];
                        for &(_, j) in &edges[range.clone()] {
                            logits.push(leaky(sd + s_src[j as usize * hn + h], self.slope));
                        }
                        let base = range.start;
                        ss.fold(i * hn + h, &logits, |k| {
                            &src.row(edges[base + k].1 as usize)[h * f..(h + 1) * f]
                        })?;
                    }
                }
            }
            AttentionKernel::Materialized => {
                let ne = edges.len();
                let _lease = mem.lease(AllocTag::EdgeCoefficients, ne * hn * 8);
                // Head-major so each destination run is contiguous per head.
                let mut logits = vec![0.0; ne * hn];
                for (e, &(i, j)) in edges.iter().enumerate() {
                    for h in 0..hn {
                        let pre = s_dst[i as usize * hn + h] + s_src[j as usize * hn + h];
                        logits[h * ne + e] = leaky(pre, self.slope);
                    }
                }
                for (i, range) in runs {
                    for h in 0..hn {
                        let base = range.start;
                        ss.fold(
                            i * hn + h,
                            &logits[h * ne + range.start..h * ne + range.end],
                            |k| &src.row(edges[base + k].1 as usize)[h * f..(h + 1) * f],
                        )?;
                    }
                }
            }
        }
        Ok(())
    }

    fn merge(&self, st: &mut AggregationState<T>, other: &AggregationState<T>) -> Result<()> {
        match (st.softmax_state.as_mut(), other.softmax_state.as_ref()) {
            (Some(a), Some(b)) if a.slots() == b.slots() => {
                a.merge(b);
                Ok(())
            }
            _ => Err(Error::Contract(
                "merging attention states of different shape".into(),
            )),
        }
    }

    fn finish(&self, st: &mut AggregationState<T>) -> Result<()> {
        let (hn, f) = (self.heads, self.head_dim);
        let ss = match st.softmax_state.as_mut() {
            Some(s) => s,
            // Already produced by `fold_all`.
            None => return Ok(()),
        };
        for i in 0..st.acc.rows() {
            for h in 0..hn {
                let out = ss.output(i * hn + h);
                st.acc.row_mut(i)[h * f..(h + 1) * f].copy_from_slice(&out);
            }
        }
        // Only the final maxima and denominators are needed from here on.
        ss.num = Vec::new();
        Ok(())
    }

    fn fold_all(
        &self,
        st: &mut AggregationState<T>,
        blocks: &[&ShardBlock],
        srcs: &[&Tensor<T>],
        local_z: &Tensor<T>,
        mem: &MemoryTracker,
    ) -> Result<()> {
        let edges = concat_edges(blocks);
        let lease = mem.lease(AllocTag::EdgeCoefficients, 2 * edges.len() * self.heads * 8);
        let (out, cache) =
            gat_reference_forward(local_z, srcs, &edges, &self.a, self.heads, self.slope)?;
        st.acc = out;
        st.softmax_state = None;
        st.scratch = vec![cache.pre, cache.alpha];
        st.hold(lease);
        Ok(())
    }

    fn theta_buffers(&self) -> Vec<Tensor<f64>> {
        vec![Tensor::zeros(self.heads, 2 * self.head_dim)]
    }

    fn begin_backward(&self, st: &mut AggregationState<T>, e_acc: &Tensor<f64>) -> Result<()> {
        e_acc.check_same_shape(&st.acc, "aggregate error")?;
        if st.softmax_state.is_none() {
            return Ok(());
        }
        let (hn, f) = (self.heads, self.head_dim);
        let mut coupling = Vec::with_capacity(st.acc.rows() * hn);
        for i in 0..st.acc.rows() {
            for h in 0..hn {
                let r = h * f..(h + 1) * f;
                coupling.push(dot(&e_acc.row(i)[r.clone()], &st.acc.row(i)[r]));
            }
        }
        st.scratch.truncate(1);
        st.scratch.push(coupling);
        Ok(())
    }

    fn backward_block(
        &self,
        st: &AggregationState<T>,
        e_acc: &Tensor<f64>,
        block: &ShardBlock,
        src: Option<&Tensor<T>>,
        local_z: &Tensor<T>,
        out: BlockGrads<'_>,
        mem: &MemoryTracker,
    ) -> Result<()> {
        let src =
            src.ok_or_else(|| Error::Contract("attention backward needs source rows".into()))?;
        self.check_shapes(block, Some(src), local_z)?;
        if block.is_empty() {
            return Ok(());
        }
        let ss = st
            .softmax_state
            .as_ref()
            .ok_or_else(|| Error::Contract("attention backward without forward state".into()))?;
        if st.scratch.len() < 2 {
            return Err(Error::Contract(
                "attention backward before begin_backward".into(),
            ));
        }
        let (hn, f) = (self.heads, self.head_dim);
        let (s_dst, coupling) = (&st.scratch[0], &st.scratch[1]);
        let s_src = half_scores(src, &self.a, hn, f, 1);
        let edges = &block.edges;

        let coefficient = |e: usize, h: usize| -> (f64, f64) {
            let (i, j) = edges[e];
            let pre = s_dst[i as usize * hn + h] + s_src[j as usize * hn + h];
            let slot = i as usize * hn + h;
            let alpha = (leaky(pre, self.slope) - ss.max[slot]).exp() / ss.den[slot];
            (pre, alpha)
        };

        let cached: Option<(Vec<f64>, _)> = match self.kernel {
            AttentionKernel::Fused => None,
            AttentionKernel::Materialized => {
                let lease = mem.lease(AllocTag::EdgeCoefficients, 2 * edges.len() * hn * 8);
                let mut buf = Vec::with_capacity(2 * edges.len() * hn);
                for e in 0..edges.len() {
                    for h in 0..hn {
                        let (pre, alpha) = coefficient(e, h);
                        buf.push(pre);
                        buf.push(alpha);
                    }
                }
                Some((buf, lease))
            }
        };

        let BlockGrads {
            local,
            src: src_grad,
            theta,
        } = out;
        let da = &mut theta[0];
        for (e, &(i, j)) in edges.iter().enumerate() {
            let (i, j) = (i as usize, j as usize);
            for h in 0..hn {
                let (pre, alpha) = match &cached {
                    Some((buf, _)) => (buf[2 * (e * hn + h)], buf[2 * (e * hn + h) + 1]),
                    None => coefficient(e, h),
                };
                let r = h * f..(h + 1) * f;
                let g = &e_acc.row(i)[r.clone()];
                let zj = &src.row(j)[r.clone()];
                let zi = &local_z.row(i)[r.clone()];
                let de = alpha * (dot(g, zj) - coupling[i * hn + h]);
                let dpre = de * leaky_grad(pre, self.slope);
                let arow = self.a.row(h);
                let (a_dst, a_src) = (&arow[..f], &arow[f..]);
                {
                    let sg = &mut src_grad.row_mut(j)[r.clone()];
                    for c in 0..f {
                        sg[c] += alpha * g[c] + dpre * a_src[c];
                    }
                }
                {
                    let lg = &mut local.row_mut(i)[r.clone()];
                    for c in 0..f {
                        lg[c] += dpre * a_dst[c];
                    }
                }
                let darow = da.row_mut(h);
                for c in 0..f {
                    darow[c] += dpre * zi[c].as_f64();
                    darow[f + c] += dpre * zj[c].as_f64();
                }
            }
        }
        Ok(())
    }

    fn backward_all(
        &self,
        st: &AggregationState<T>,
        e_acc: &Tensor<f64>,
        blocks: &[&ShardBlock],
        srcs: &[&Tensor<T>],
        local_z: &Tensor<T>,
        local_grad: &mut Tensor<f64>,
        src_grads: &mut [Tensor<f64>],
        theta: &mut [Tensor<f64>],
        _mem: &MemoryTracker,
    ) -> Result<()> {
        if st.scratch.len() != 2 || st.softmax_state.is_some() {
            return Err(Error::Contract(
                "retained attention backward without cached coefficients".into(),
            ));
        }
        let cache = GatReferenceCache {
            pre: st.scratch[0].clone(),
            alpha: st.scratch[1].clone(),
        };
        let edges = concat_edges(blocks);
        let g = gat_reference_backward(
            local_z, srcs, &edges, &self.a, self.heads, self.slope, &cache, e_acc,
        )?;
        local_grad.add_assign(&g.dz_dst);
        for (acc, d) in src_grads.iter_mut().zip(&g.dz_src) {
            acc.add_assign(d);
        }
        theta[0].add_assign(&g.da);
        Ok(())
    }
}

/// Edges of several blocks as `(dst, block index, src row)`, in block order.
pub fn concat_edges(blocks: &[&ShardBlock]) -> Vec<(u32, u32, u32)> {
    let mut out = Vec::new();
    for (k, b) in blocks.iter().enumerate() {
        out.extend(b.edges.iter().map(|&(d, s)| (d, k as u32, s)));
    }
    out
}

/// Everything the materialized backward needs from its forward pass.
/// Both vectors are edge-major: entry `e * heads + h`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatReferenceCache {
    pub pre: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GatReferenceGrads {
    pub dz_dst: Tensor<f64>,
    pub dz_src: Vec<Tensor<f64>>,
    pub da: Tensor<f64>,
}

fn check_edges<T: Scalar>(
    z_dst: &Tensor<T>,
    z_src: &[&Tensor<T>],
    edges: &[(u32, u32, u32)],
) -> Result<()> {
    for &(d, k, s) in edges {
        let ok = (d as usize) < z_dst.rows()
            && (k as usize) < z_src.len()
            && (s as usize) < z_src[k as usize].rows();
        if !ok {
            return Err(input_err!("attention edge ({d}, {k}, {s}) out of range"));
        }
    }
    Ok(())
}

/// Two-step attention: all logits and coefficients are materialized, then
/// normalized per destination and used to weight the source rows. Sources
/// are given as several row sets; an edge `(i, k, j)` reads row `j` of
/// `z_src[k]`.
pub fn gat_reference_forward<T: Scalar>(
    z_dst: &Tensor<T>,
    z_src: &[&Tensor<T>],
    edges: &[(u32, u32, u32)],
    a: &Tensor<f64>,
    heads: usize,
    slope: f64,
) -> Result<(Tensor<f64>, GatReferenceCache)> {
    let f = z_dst.cols() / heads.max(1);
    check_params(a, heads, f)?;
    check_edges(z_dst, z_src, edges)?;
    let s_dst = half_scores(z_dst, a, heads, f, 0);
    let s_src: Vec<Vec<f64>> = z_src
        .iter()
        .map(|z| half_scores(z, a, heads, f, 1))
        .collect();
    let ne = edges.len();
    let mut pre = vec![0.0; ne * heads];
    let mut logit = vec![0.0; ne * heads];
    let mut max = vec![f64::NEG_INFINITY; z_dst.rows() * heads];
    for (e, &(i, k, j)) in edges.iter().enumerate() {
        for h in 0..heads {
            let p = s_dst[i as usize * heads + h] + s_src[k as usize][j as usize * heads + h];
            let l = leaky(p, slope);
            if !l.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite attention logit on edge {e}"
                )));
            }
            pre[e * heads + h] = p;
            logit[e * heads + h] = l;
            let slot = i as usize * heads + h;
            max[slot] = max[slot].max(l);
        }
    }
    let mut den = vec![0.0; z_dst.rows() * heads];
    let mut alpha = vec![0.0; ne * heads];
    for (e, &(i, _, _)) in edges.iter().enumerate() {
        for h in 0..heads {
            let slot = i as usize * heads + h;
            let w = (logit[e * heads + h] - max[slot]).exp();
            alpha[e * heads + h] = w;
            den[slot] += w;
        }
    }
    let mut out = Tensor::<f64>::zeros(z_dst.rows(), heads * f);
    for (e, &(i, k, j)) in edges.iter().enumerate() {
        let zj = z_src[k as usize].row(j as usize);
        for h in 0..heads {
            let slot = i as usize * heads + h;
            let w = alpha[e * heads + h] / den[slot];
            alpha[e * heads + h] = w;
            let orow = &mut out.row_mut(i as usize)[h * f..(h + 1) * f];
            for c in 0..f {
                orow[c] += w * zj[h * f + c].as_f64();
            }
        }
    }
    Ok((out, GatReferenceCache { pre, alpha }))
}

/// Backward of [`gat_reference_forward`] given the output gradient `g`.
#[allow(clippy::too_many_arguments)]
pub fn gat_reference_backward<T: Scalar>(
    z_dst: &Tensor<T>,
    z_src: &[&Tensor<T>],
    edges: &[(u32, u32, u32)],
    a: &Tensor<f64>,
    heads: usize,
    slope: f64,
    cache: &GatReferenceCache,
    g: &Tensor<f64>,
) -> Result<GatReferenceGrads> {
    let f = z_dst.cols() / heads.max(1);
    check_params(a, heads, f)?;
    check_edges(z_dst, z_src, edges)?;
    if g.shape() != (z_dst.rows(), heads * f) {
        return Err(input_err!("output gradient shape {:?}", g.shape()));
    }
    if cache.alpha.len() != edges.len() * heads || cache.pre.len() != edges.len() * heads {
        return Err(input_err!("attention cache does not match the edge list"));
    }
    let mut dalpha = vec![0.0; edges.len() * heads];
    let mut coupling = vec![0.0; z_dst.rows() * heads];
    for (e, &(i, k, j)) in edges.iter().enumerate() {
        let zj = z_src[k as usize].row(j as usize);
        for h in 0..heads {
            let r = h * f..(h + 1) * f;
            let d = dot(&g.row(i as usize)[r.clone()], &zj[r]);
            dalpha[e * heads + h] = d;
            coupling[i as usize * heads + h] += cache.alpha[e * heads + h] * d;
        }
    }
    let mut dz_dst = Tensor::<f64>::zeros(z_dst.rows(), heads * f);
    let mut dz_src: Vec<Tensor<f64>> = z_src
        .iter()
        .map(|z| Tensor::zeros(z.rows(), heads * f))
        .collect();
    let mut da = Tensor::<f64>::zeros(heads, 2 * f);
    for (e, &(i, k, j)) in edges.iter().enumerate() {
        let (i, k, j) = (i as usize, k as usize, j as usize);
        for h in 0..heads {
            let idx = e * heads + h;
            let alpha = cache.alpha[idx];
            let dpre =
                alpha * (dalpha[idx] - coupling[i * heads + h]) * leaky_grad(cache.pre[idx], slope);
            let r = h * f..(h + 1) * f;
            let arow = a.row(h);
            let gi = &g.row(i)[r.clone()];
            {
                let sg = &mut dz_src[k].row_mut(j)[r.clone()];
                for c in 0..f {
                    sg[c] += alpha * gi[c] + dpre * arow[f + c];
                }
            }
            {
                let dg = &mut dz_dst.row_mut(i)[r.clone()];
                for c in 0..f {
                    dg[c] += dpre * arow[c];
                }
            }
            let zi = &z_dst.row(i)[r.clone()];
            let zj = &z_src[k].row(j)[r];
            let darow = da.row_mut(h);
            for c in 0..f {
                darow[c] += dpre * zi[c].as_f64();
                darow[f + c] += dpre * zj[c].as_f64();
            }
        }
    }
    Ok(GatReferenceGrads { dz_dst, dz_src, da })
}

//! Mean (or plain sum) neighbor aggregation.

use std::sync::Arc;

use crate::error::{input_err, Result};
use crate::graph::ShardBlock;
use crate::runtime::{
    AggregateKind, AggregationState, Aggregator, AggregatorSpec, BlockGrads, MemoryTracker,
    MessageFn,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `acc_i = (1/|N(i)|) Σ_j z_j` with the degree taken over the full graph.
/// Nodes without in-neighbors get zero.
#[derive(Debug, Clone)]
pub struct MeanAggregator {
    width: usize,
    /// Global in-degree of each local destination.
    degree: Arc<Vec<f64>>,
    normalize: bool,
}

impl MeanAggregator {
    pub fn new(width: usize, degree: Arc<Vec<f64>>) -> Self {
        MeanAggregator {
            width,
            degree,
            normalize: true,
        }
    }

    /// Unnormalized sum aggregation.
    pub fn sum(width: usize, rows: usize) -> Self {
        MeanAggregator {
            width,
            degree: Arc::new(vec![1.0; rows]),
            normalize: false,
        }
    }

    fn check<T: Scalar>(&self, st: &AggregationState<T>, block: &ShardBlock) -> Result<()> {
        if st.acc.rows() != self.degree.len() {
            return Err(input_err!(
                "aggregate has {} rows but {} degrees were given",
                st.acc.rows(),
                self.degree.len()
            ));
        }
        if let Some(&(d, _)) = block
            .edges
            .iter()
            .find(|(d, _)| *d as usize >= self.degree.len())
        {
            return Err(input_err!("block destination {d} outside local partition"));
        }
        Ok(())
    }
}

impl<T: Scalar> Aggregator<T> for MeanAggregator {
    fn spec(&self) -> AggregatorSpec {
        AggregatorSpec {
            needs_input_rematerialization: false,
            message_fn: MessageFn::Identity,
            aggregate: if self.normalize {
                AggregateKind::Mean
            } else {
                AggregateKind::Sum
            },
            has_theta: false,
        }
    }

    fn in_width(&self) -> usize {
        self.width
    }

    fn out_width(&self) -> usize {
        self.width
    }

    fn fold_block(
        &self,
        st: &mut AggregationState<T>,
        block: &ShardBlock,
        src: &Tensor<T>,
        _local_z: &Tensor<T>,
        _mem: &MemoryTracker,
    ) -> Result<()> {
        self.check(st, block)?;
        for &(d, s) in &block.edges {
            st.acc.add_to_row(d as usize, src.row(s as usize));
        }
        Ok(())
    }

    fn merge(&self, st: &mut AggregationState<T>, other: &AggregationState<T>) -> Result<()> {
        st.acc.check_same_shape(&other.acc, "partial aggregate")?;
        st.acc.add_assign(&other.acc);
        Ok(())
    }

    fn finish(&self, st: &mut AggregationState<T>) -> Result<()> {
        if self.normalize {
            for (i, &deg) in self.degree.iter().enumerate() {
                if deg > 0.0 {
                    st.acc.row_mut(i).iter_mut().for_each(|x| *x /= deg);
                }
            }
        }
        Ok(())
    }

    fn backward_block(
        &self,
        st: &AggregationState<T>,
        e_acc: &Tensor<f64>,
        block: &ShardBlock,
        _src: Option<&Tensor<T>>,
        _local_z: &Tensor<T>,
        out: BlockGrads<'_>,
        _mem: &MemoryTracker,
    ) -> Result<()> {
        self.check(st, block)?;
        let w = self.width;
        for &(d, s) in &block.edges {
            let deg = self.degree[d as usize];
            let g = e_acc.row(d as usize);
            let row = out.src.row_mut(s as usize);
            if self.normalize {
                for c in 0..w {
                    row[c] += g[c] / deg;
                }
            } else {
                for c in 0..w {
                    row[c] += g[c];
                }
            }
        }
        Ok(())
    }
}

/// Global in-degree of each member of `members`.
pub fn global_degrees(graph: &crate::graph::Graph, members: &[u32]) -> Vec<f64> {
    members
        .iter()
        .map(|&v| graph.in_degree(v as usize) as f64)
        .collect()
}

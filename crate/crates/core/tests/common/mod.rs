//! Shared fixtures: a one-layer loopback harness and dense oracles.

#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sargraph_core::graph::{
    build_all_shard_blocks, build_csr_typed, Edge, Graph, PartitionLayout, PartitionMap,
};
use sargraph_core::layers::{
    basis_weights, dist_batchnorm_backward, dist_batchnorm_forward, BN_EPS,
};
use sargraph_core::runtime::{
    sar_backward, sar_forward, Aggregator, BlockPlan, CommCounts, CommLedger, MemoryLedger,
    MemoryTracker, RematPolicy, SarContext,
};
use sargraph_core::transport::{loopback_world, TransportReducer};
use sargraph_core::{Scalar, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// `edges` random directed edges among `n` nodes (self-loops allowed), with
/// relation ids below `relations`.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, edges: usize, relations: usize) -> Graph {
    let list: Vec<Edge> = (0..edges)
        .map(|_| {
            Edge::typed(
                rng.gen_range(0..n),
                rng.gen_range(0..n),
                rng.gen_range(0..relations) as u8,
            )
        })
        .collect();
    build_csr_typed(&list, n, relations > 1).unwrap()
}

pub fn random_partition(rng: &mut ChaCha8Rng, n: usize, parts: usize) -> PartitionMap {
    let mut a: Vec<u32> = (0..n).map(|i| (i % parts) as u32).collect();
    for i in (1..n).rev() {
        a.swap(i, rng.gen_range(0..=i));
    }
    PartitionMap::new(a, parts).unwrap()
}

/// Outcome of one layer's forward and backward aggregation across workers,
/// reassembled in global node order.
pub struct LayerRun {
    pub acc: Tensor<f64>,
    pub dz: Tensor<f64>,
    /// Parameter gradients summed over workers.
    pub theta: Vec<Tensor<f64>>,
    pub comm: Vec<CommCounts>,
    pub memory: Vec<MemoryLedger>,
}

pub struct Setup {
    pub policy: RematPolicy,
    pub prefetch: bool,
}

impl Default for Setup {
    fn default() -> Self {
        Setup {
            policy: RematPolicy::Sar,
            prefetch: false,
        }
    }
}

/// Runs one aggregation layer on every partition of `pm` over loopback
/// transport. `make(rank, members)` builds the worker's aggregator. With
/// `e_acc` (global rows) the backward pass runs as well.
pub fn run_layer<T, A, F>(
    graph: &Graph,
    pm: &PartitionMap,
    z: &Tensor<T>,
    e_acc: Option<&Tensor<f64>>,
    setup: &Setup,
    make: F,
) -> LayerRun
where
    T: Scalar,
    A: Aggregator<T>,
    F: Fn(usize, &[u32]) -> A + Sync,
{
    let layout = PartitionLayout::new(pm);
    let table = build_all_shard_blocks(graph, pm).unwrap();
    let n = pm.num_parts();
    let world = loopback_world::<T>(n, Duration::from_secs(30));
    let outs: Vec<_> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..n)
            .map(|rank| {
                let (layout, table, world, make) = (&layout, &table, &world, &make);
                s.spawn(move || {
                    let members = layout.members(rank);
                    let idx: Vec<usize> = members.iter().map(|&v| v as usize).collect();
                    let agg = make(rank, members);
                    let plan = BlockPlan::new(table, layout, rank).unwrap();
                    let memory = MemoryTracker::new();
                    let comm = CommLedger::new();
                    let ctx = SarContext {
                        transport: &world[rank],
                        memory: &memory,
                        comm: &comm,
                        prefetch: setup.prefetch,
                        policy: setup.policy,
                    };
                    let local = Arc::new(z.gather_rows(&idx));
                    let (st, _) = sar_forward(&agg, 1, local, &plan, &ctx, None, 0).unwrap();
                    let acc = st.acc.clone();
                    let back = e_acc.map(|e| {
                        sar_backward(&agg, 1, st, &e.gather_rows(&idx), &plan, &ctx).unwrap()
                    });
                    (acc, back, comm.counts(), memory.snapshot())
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let width_out = outs[0].0.cols();
    let mut acc = Tensor::<f64>::zeros(graph.num_nodes(), width_out);
    let mut dz = Tensor::<f64>::zeros(graph.num_nodes(), z.cols());
    let mut theta: Vec<Tensor<f64>> = Vec::new();
    let (mut comm, mut memory) = (Vec::new(), Vec::new());
    for (rank, (a, back, c, m)) in outs.into_iter().enumerate() {
        for (k, &v) in layout.members(rank).iter().enumerate() {
            acc.row_mut(v as usize).copy_from_slice(a.row(k));
        }
        if let Some((e, th)) = back {
            for (k, &v) in layout.members(rank).iter().enumerate() {
                dz.row_mut(v as usize).copy_from_slice(e.row(k));
            }
            if theta.is_empty() {
                theta = th;
            } else {
                for (t, x) in theta.iter_mut().zip(&th) {
                    t.add_assign(x);
                }
            }
        }
        comm.push(c);
        memory.push(m);
    }
    LayerRun {
        acc,
        dz,
        theta,
        comm,
        memory,
    }
}

/// `Σ g ⊙ x`.
pub fn weighted_sum(g: &Tensor<f64>, x: &Tensor<f64>) -> f64 {
    g.data().iter().zip(x.data()).map(|(a, b)| a * b).sum()
}

/// Central finite differences of `f` with respect to every entry of `x`.
pub fn finite_diff(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let mut xp = x.clone();
    for k in 0..x.len() {
        let v = x.data()[k];
        xp.data_mut()[k] = v + h;
        let up = f(&xp);
        xp.data_mut()[k] = v - h;
        let down = f(&xp);
        xp.data_mut()[k] = v;
        out.data_mut()[k] = (up - down) / (2.0 * h);
    }
    out
}

/// Dense mean aggregation over in-neighbors (zero for isolated nodes).
pub fn dense_mean(graph: &Graph, z: &Tensor<f64>) -> Tensor<f64> {
    let mut out = Tensor::zeros(graph.num_nodes(), z.cols());
    for i in 0..graph.num_nodes() {
        let nb = graph.in_neighbors(i);
        for &j in nb {
            for (o, v) in out.row_mut(i).iter_mut().zip(z.row(j as usize)) {
                *o += v / nb.len() as f64;
            }
        }
    }
    out
}

/// Output, mean, variance and input gradient of one batch norm worker.
pub type BnRun = (Tensor<f64>, Vec<f64>, Vec<f64>, Tensor<f64>);

/// Distributed batch norm with one loopback worker per chunk and upstream
/// gradient `grads[k]` on chunk `k`.
pub fn bn_workers(chunks: &[Tensor<f64>], grads: &[Tensor<f64>]) -> Vec<BnRun> {
    let world = loopback_world::<f64>(chunks.len(), Duration::from_secs(10));
    let f = chunks[0].cols();
    let gamma = Tensor::filled(1, f, 1.5);
    let beta = Tensor::filled(1, f, -0.5);
    std::thread::scope(|s| {
        let hs: Vec<_> = (0..chunks.len())
            .map(|k| {
                let (x, g, t, gamma, beta) = (&chunks[k], &grads[k], &world[k], &gamma, &beta);
                s.spawn(move || {
                    let mut red = TransportReducer {
                        transport: t,
                        comm: None,
                    };
                    let out = dist_batchnorm_forward(x, gamma, beta, BN_EPS, &mut red).unwrap();
                    let back =
                        dist_batchnorm_backward(x, gamma, beta, BN_EPS, g, &mut red).unwrap();
                    (out.out, out.stats.mean, out.stats.var, back.dx)
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

/// Dense relational aggregation with `W_r = Σ_b coef[r][b] V_b`.
pub fn dense_rgcn(
    graph: &Graph,
    z: &Tensor<f64>,
    bases: &[Tensor<f64>],
    coef: &Tensor<f64>,
) -> Tensor<f64> {
    let w = basis_weights(bases, coef).unwrap();
    let n = graph.num_nodes();
    let mut out = Tensor::zeros(n, bases[0].cols());
    for i in 0..n {
        for (rel, wr) in w.iter().enumerate() {
            let nb: Vec<usize> = (graph.indptr()[i]..graph.indptr()[i + 1])
                .filter(|&e| graph.relation(e) as usize == rel)
                .map(|e| graph.indices()[e] as usize)
                .collect();
            for &j in &nb {
                let hw = z.gather_rows(&[j]).matmul(wr).unwrap();
                for (o, v) in out.row_mut(i).iter_mut().zip(hw.row(0)) {
                    *o += v / nb.len() as f64;
                }
            }
        }
    }
    out
}

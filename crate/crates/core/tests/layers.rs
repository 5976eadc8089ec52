mod common;

use std::sync::Arc;

use common::*;
use sargraph_core::autodiff::LocalReducer;
use sargraph_core::graph::{build_csr, build_csr_typed, Edge, PartitionMap};
use sargraph_core::layers::{
    dist_batchnorm_forward, gat_reference_backward, gat_reference_forward, global_degrees,
    relation_degrees, AttentionAggregator, AttentionKernel, MeanAggregator, RelationalAggregator,
    BN_EPS,
};
use sargraph_core::tensor::rel_diff;
use sargraph_core::{Error, Tensor};

fn mean_agg(
    graph: &sargraph_core::graph::Graph,
    width: usize,
) -> impl Fn(usize, &[u32]) -> MeanAggregator + Sync + '_ {
    move |_, m| MeanAggregator::new(width, Arc::new(global_degrees(graph, m)))
}

fn gat_agg(
    a: &Tensor<f64>,
    heads: usize,
    f: usize,
    kernel: AttentionKernel,
) -> impl Fn(usize, &[u32]) -> AttentionAggregator + Sync + '_ {
    move |_, _| AttentionAggregator::new(a.clone(), heads, f, 0.2, kernel).unwrap()
}

#[test]
fn mean_of_two_neighbors() {
    let g = build_csr(&[(0, 2), (1, 2)], 3).unwrap();
    let z = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[0.0, 0.0]]);
    for parts in [1, 3] {
        let pm =
            PartitionMap::from_assignment((0..3).map(|i| (i % parts) as u32).collect()).unwrap();
        let run = run_layer(&g, &pm, &z, None, &Setup::default(), mean_agg(&g, 2));
        assert_eq!(run.acc.row(2), &[2.0, 3.0]);
        assert_eq!(
            run.acc.row(0),
            &[0.0, 0.0],
            "isolated node aggregates to zero"
        );
    }
}

#[test]
fn mean_is_invariant_to_partitioning() {
    let mut r = rng(1);
    let g = random_graph(&mut r, 40, 200, 1);
    let z = random_tensor(&mut r, 40, 5);
    let want = dense_mean(&g, &z);
    for parts in [1, 2, 3, 5] {
        let pm = random_partition(&mut r, 40, parts);
        let run = run_layer(&g, &pm, &z, None, &Setup::default(), mean_agg(&g, 5));
        assert!(rel_diff(&run.acc, &want) < 1e-12, "parts={parts}");
    }
}

#[test]
fn zero_attention_vector_gives_the_mean() {
    let mut r = rng(2);
    let g = random_graph(&mut r, 30, 150, 1);
    let z = random_tensor(&mut r, 30, 6);
    let a = Tensor::zeros(2, 6);
    let pm = random_partition(&mut r, 30, 3);
    let run = run_layer(
        &g,
        &pm,
        &z,
        None,
        &Setup::default(),
        gat_agg(&a, 2, 3, AttentionKernel::Fused),
    );
    assert!(rel_diff(&run.acc, &dense_mean(&g, &z)) < 1e-12);
}

#[test]
fn single_neighbor_gets_full_attention() {
    let g = build_csr(&[(1, 0)], 2).unwrap();
    let z = Tensor::<f64>::from_rows(&[&[0.5, -1.0], &[2.0, 7.0]]);
    let a = Tensor::<f64>::from_rows(&[&[3.0, -1.0, 0.25, 4.0]]);
    let pm = PartitionMap::from_assignment(vec![0, 1]).unwrap();
    for kernel in [AttentionKernel::Fused, AttentionKernel::Materialized] {
        let run = run_layer(
            &g,
            &pm,
            &z,
            None,
            &Setup::default(),
            gat_agg(&a, 1, 2, kernel),
        );
        assert_eq!(run.acc.row(0), &[2.0, 7.0]);
    }
}

#[test]
fn attention_weights_sum_to_one() {
    let mut r = rng(3);
    let g = random_graph(&mut r, 25, 120, 1);
    let z = random_tensor(&mut r, 25, 4);
    let a = random_tensor(&mut r, 2, 4);
    let edges: Vec<(u32, u32, u32)> = g.edges().map(|e| (e.dst as u32, 0, e.src as u32)).collect();
    let (_, cache) = gat_reference_forward(&z, &[&z], &edges, &a, 2, 0.2).unwrap();
    let mut sums = vec![0.0; 25 * 2];
    for (e, &(d, _, _)) in edges.iter().enumerate() {
        for h in 0..2 {
            sums[d as usize * 2 + h] += cache.alpha[e * 2 + h];
        }
    }
    for i in 0..25 {
        let expect = if g.in_degree(i) > 0 { 1.0 } else { 0.0 };
        for h in 0..2 {
            assert!((sums[i * 2 + h] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_two_logits_hand_example() {
    // Logits {0, ln 3} via a = [0 | 1] on scalar features and slope 1.
    let g = build_csr(&[(1, 0), (2, 0)], 3).unwrap();
    let z = Tensor::<f64>::from_rows(&[&[0.0], &[0.0], &[3f64.ln()]]);
    let a = Tensor::<f64>::from_rows(&[&[0.0, 1.0]]);
    let pm = PartitionMap::from_assignment(vec![0, 1, 0]).unwrap();
    let agg = |_: usize, _: &[u32]| {
        AttentionAggregator::new(a.clone(), 1, 1, 1.0, AttentionKernel::Fused).unwrap()
    };
    let run = run_layer(&g, &pm, &z, None, &Setup::default(), agg);
    let want = (0.0 + 3.0 * 3f64.ln()) / 4.0;
    assert!((run.acc.get(0, 0) - want).abs() < 1e-15);
}

#[test]
fn attention_is_invariant_to_logit_shift() {
    // Scores read column 0 of the source; column 1 carries the value.
    let g = build_csr(&[(1, 0), (2, 0), (3, 0)], 4).unwrap();
    let a = Tensor::<f64>::from_rows(&[&[0.0, 0.0, 1.0, 0.0]]);
    let base = Tensor::<f64>::from_rows(&[&[0.0, 0.0], &[0.1, 1.0], &[0.7, 2.0], &[0.3, 3.0]]);
    let mut shifted = base.clone();
    for i in 1..4 {
        shifted.set(i, 0, base.get(i, 0) + 1000.0);
    }
    let pm = PartitionMap::from_assignment(vec![0, 1, 1, 0]).unwrap();
    let agg = |_: usize, _: &[u32]| {
        AttentionAggregator::new(a.clone(), 1, 2, 1.0, AttentionKernel::Fused).unwrap()
    };
    let x = run_layer(&g, &pm, &base, None, &Setup::default(), agg);
    let y = run_layer(&g, &pm, &shifted, None, &Setup::default(), agg);
    assert!(y.acc.all_finite());
    assert!((x.acc.get(0, 1) - y.acc.get(0, 1)).abs() < 1e-9);
}

#[test]
fn fused_and_materialized_match_reference_and_finite_differences() {
    let mut r = rng(4);
    let (n, heads, f) = (24, 2, 3);
    let g = random_graph(&mut r, n, 110, 1);
    let z = random_tensor(&mut r, n, heads * f);
    let a = random_tensor(&mut r, heads, 2 * f);
    let e = random_tensor(&mut r, n, heads * f);
    let edges: Vec<(u32, u32, u32)> = g.edges().map(|x| (x.dst as u32, 0, x.src as u32)).collect();
    let (want, cache) = gat_reference_forward(&z, &[&z], &edges, &a, heads, 0.2).unwrap();
    let grads = gat_reference_backward(&z, &[&z], &edges, &a, heads, 0.2, &cache, &e).unwrap();
    let mut ref_dz = grads.dz_dst.clone();
    ref_dz.add_assign(&grads.dz_src[0]);

    let loss_z = |zz: &Tensor<f64>| {
        weighted_sum(
            &e,
            &gat_reference_forward(zz, &[zz], &edges, &a, heads, 0.2)
                .unwrap()
                .0,
        )
    };
    let loss_a = |aa: &Tensor<f64>| {
        weighted_sum(
            &e,
            &gat_reference_forward(&z, &[&z], &edges, aa, heads, 0.2)
                .unwrap()
                .0,
        )
    };
    assert!(rel_diff(&ref_dz, &finite_diff(&z, 1e-6, loss_z)) < 1e-6);
    assert!(rel_diff(&grads.da, &finite_diff(&a, 1e-6, loss_a)) < 1e-6);

    let pm = random_partition(&mut r, n, 3);
    for kernel in [AttentionKernel::Fused, AttentionKernel::Materialized] {
        for prefetch in [false, true] {
            let setup = Setup {
                prefetch,
                ..Setup::default()
            };
            let run = run_layer(&g, &pm, &z, Some(&e), &setup, gat_agg(&a, heads, f, kernel));
            assert!(rel_diff(&run.acc, &want) < 1e-12, "{kernel:?}");
            assert!(rel_diff(&run.dz, &ref_dz) < 1e-12, "{kernel:?}");
            assert!(rel_diff(&run.theta[0], &grads.da) < 1e-12, "{kernel:?}");
        }
    }
}

#[test]
fn gat_in_f32_tracks_f64() {
    let mut r = rng(5);
    let g = random_graph(&mut r, 30, 150, 1);
    let z = random_tensor(&mut r, 30, 4);
    let a = random_tensor(&mut r, 1, 8);
    let pm = random_partition(&mut r, 30, 2);
    let x = run_layer(
        &g,
        &pm,
        &z,
        None,
        &Setup::default(),
        gat_agg(&a, 1, 4, AttentionKernel::Fused),
    );
    let y = run_layer(
        &g,
        &pm,
        &z.cast::<f32>(),
        None,
        &Setup::default(),
        gat_agg(&a, 1, 4, AttentionKernel::Fused),
    );
    assert!(rel_diff(&y.acc, &x.acc) < 1e-5);
}

#[test]
fn batchnorm_statistics_span_all_workers() {
    let a = Tensor::<f64>::from_rows(&[&[1.0], &[3.0]]);
    let b = Tensor::<f64>::from_rows(&[&[5.0], &[7.0]]);
    let g = Tensor::zeros(2, 1);
    let out = bn_workers(&[a, b], &[g.clone(), g]);
    for (_, mean, var, _) in &out {
        assert_eq!(mean, &[4.0]);
        assert_eq!(var, &[5.0]);
    }
    let y0 = 1.5 * (1.0 - 4.0) / (5.0 + BN_EPS).sqrt() - 0.5;
    assert!((out[0].0.get(0, 0) - y0).abs() < 1e-12);
}

#[test]
fn batchnorm_one_worker_equals_four() {
    let mut r = rng(6);
    let x = random_tensor(&mut r, 12, 3);
    let g = random_tensor(&mut r, 12, 3);
    let whole = bn_workers(std::slice::from_ref(&x), std::slice::from_ref(&g));
    let rows = |k: usize| [3 * k, 3 * k + 1, 3 * k + 2];
    let xs: Vec<Tensor<f64>> = (0..4).map(|k| x.gather_rows(&rows(k))).collect();
    let gs: Vec<Tensor<f64>> = (0..4).map(|k| g.gather_rows(&rows(k))).collect();
    let split = bn_workers(&xs, &gs);
    for (k, (y, _, _, dx)) in split.iter().enumerate() {
        assert!(rel_diff(y, &whole[0].0.gather_rows(&rows(k))) < 1e-12);
        assert!(rel_diff(dx, &whole[0].3.gather_rows(&rows(k))) < 1e-12);
    }
    let fd = finite_diff(&x, 1e-6, |xx| {
        weighted_sum(
            &g,
            &bn_workers(std::slice::from_ref(xx), std::slice::from_ref(&g))[0].0,
        )
    });
    assert!(rel_diff(&whole[0].3, &fd) < 1e-6);
}

#[test]
fn batchnorm_constant_column_is_finite() {
    let x = Tensor::<f64>::from_rows(&[&[2.0, 1.0], &[2.0, 3.0], &[2.0, 5.0]]);
    let out = dist_batchnorm_forward(
        &x,
        &Tensor::filled(1, 2, 1.0),
        &Tensor::zeros(1, 2),
        BN_EPS,
        &mut LocalReducer,
    )
    .unwrap();
    assert!(out.out.all_finite());
    for i in 0..3 {
        assert_eq!(out.out.get(i, 0), 0.0);
    }
}

fn rgcn_agg<'a>(
    graph: &'a sargraph_core::graph::Graph,
    bases: &'a [Tensor<f64>],
    coef: &'a Tensor<f64>,
) -> impl Fn(usize, &[u32]) -> RelationalAggregator + Sync + 'a {
    move |_, m| {
        let deg = relation_degrees(graph, m, coef.rows()).unwrap();
        RelationalAggregator::new(bases.to_vec(), coef.clone(), Arc::new(deg)).unwrap()
    }
}

#[test]
fn relational_matches_dense_and_finite_differences() {
    let mut r = rng(7);
    let (n, nr, nb) = (20, 3, 2);
    let g = random_graph(&mut r, n, 90, nr);
    let z = random_tensor(&mut r, n, 3);
    let bases: Vec<Tensor<f64>> = (0..nb).map(|_| random_tensor(&mut r, 3, 2)).collect();
    let coef = random_tensor(&mut r, nr, nb);
    let e = random_tensor(&mut r, n, 2);
    let pm = random_partition(&mut r, n, 3);
    let run = run_layer(
        &g,
        &pm,
        &z,
        Some(&e),
        &Setup::default(),
        rgcn_agg(&g, &bases, &coef),
    );
    assert!(rel_diff(&run.acc, &dense_rgcn(&g, &z, &bases, &coef)) < 1e-12);

    let fd_z = finite_diff(&z, 1e-6, |zz| {
        weighted_sum(&e, &dense_rgcn(&g, zz, &bases, &coef))
    });
    assert!(rel_diff(&run.dz, &fd_z) < 1e-7);
    for b in 0..nb {
        let fd = finite_diff(&bases[b], 1e-6, |v| {
            let mut bs = bases.clone();
            bs[b] = v.clone();
            weighted_sum(&e, &dense_rgcn(&g, &z, &bs, &coef))
        });
        assert!(rel_diff(&run.theta[b], &fd) < 1e-7, "basis {b}");
    }
    let fd_coef = finite_diff(&coef, 1e-6, |c| {
        weighted_sum(&e, &dense_rgcn(&g, &z, &bases, c))
    });
    assert!(rel_diff(&run.theta[nb], &fd_coef) < 1e-7);
}

#[test]
fn single_relation_single_basis_is_mean_then_matmul() {
    let mut r = rng(8);
    let g = random_graph(&mut r, 15, 60, 1);
    let z = random_tensor(&mut r, 15, 4);
    let v = random_tensor(&mut r, 4, 3);
    let coef = Tensor::<f64>::from_rows(&[&[1.0]]);
    let pm = random_partition(&mut r, 15, 2);
    let bases = [v.clone()];
    let run = run_layer(
        &g,
        &pm,
        &z,
        None,
        &Setup::default(),
        rgcn_agg(&g, &bases, &coef),
    );
    let want = dense_mean(&g, &z).matmul(&v).unwrap();
    assert!(rel_diff(&run.acc, &want) < 1e-12);
}

#[test]
fn relation_id_out_of_range_is_rejected() {
    let g = build_csr_typed(&[Edge::typed(0, 1, 0), Edge::typed(1, 0, 2)], 2, true).unwrap();
    let err = relation_degrees(&g, &[0, 1], 2).unwrap_err();
    assert!(matches!(err, Error::Input(_)), "{err}");
}

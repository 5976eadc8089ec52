//! Seeded random graph generators.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::engine::config::SynthSpec;
use crate::error::{input_err, Result};
use crate::graph::{build_csr_typed, Edge};
use crate::tensor::Tensor;

pub fn generate(spec: &SynthSpec, train_fraction: f64, val_fraction: f64) -> Result<Dataset> {
    match *spec {
        SynthSpec::ErdosRenyi {
            nodes,
            edges,
            features,
            classes,
            relations,
            seed,
        } => erdos_renyi(
            nodes,
            edges,
            features,
            classes,
            relations,
            seed,
            train_fraction,
            val_fraction,
        ),
        SynthSpec::Sbm {
            nodes,
            blocks,
            p_in,
            p_out,
            features,
            noise,
            seed,
        } => sbm(
            nodes,
            blocks,
            p_in,
            p_out,
            features,
            noise,
            seed,
            train_fraction,
            val_fraction,
        ),
    }
}

/// `edges` directed edges with endpoints drawn uniformly (no self-loops),
/// standard normal features and uniform labels. With `relations > 1` each
/// edge gets a uniform relation id.
#[allow(clippy::too_many_arguments)]
pub fn erdos_renyi(
    nodes: usize,
    edges: usize,
    features: usize,
    classes: usize,
    relations: usize,
    seed: u64,
    train_fraction: f64,
    val_fraction: f64,
) -> Result<Dataset> {
    if nodes < 2 || classes == 0 || relations == 0 || relations > 256 {
        return Err(input_err!(
            "erdos-renyi needs >= 2 nodes, >= 1 class and 1..=256 relations"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut list = Vec::with_capacity(edges);
    while list.len() < edges {
        let (s, d) = (rng.gen_range(0..nodes), rng.gen_range(0..nodes));
        if s != d {
            let rel = if relations > 1 {
                rng.gen_range(0..relations) as u8
            } else {
                0
            };
            list.push(Edge::typed(s, d, rel));
        }
    }
    let graph = build_csr_typed(&list, nodes, relations > 1)?;
    let x = normal_matrix(&mut rng, nodes, features);
    let labels = (0..nodes)
        .map(|_| rng.gen_range(0..classes) as i64)
        .collect();
    let (train, val, test) = splits(&mut rng, nodes, train_fraction, val_fraction);
    Ok(Dataset {
        graph,
        features: x,
        labels,
        train,
        val,
        test,
    })
}

/// Symmetric stochastic block model with `blocks` equal communities. Node
/// `i` belongs to community `i * blocks / nodes`; its features are the
/// community centroid plus `noise`-scaled Gaussian noise.
#[allow(clippy::too_many_arguments)]
pub fn sbm(
    nodes: usize,
    blocks: usize,
    p_in: f64,
    p_out: f64,
    features: usize,
    noise: f64,
    seed: u64,
    train_fraction: f64,
    val_fraction: f64,
) -> Result<Dataset> {
    if blocks == 0
        || nodes < blocks
        || !(0.0..=1.0).contains(&p_in)
        || !(0.0..=1.0).contains(&p_out)
    {
        return Err(input_err!("invalid stochastic block model parameters"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let community: Vec<usize> = (0..nodes).map(|i| i * blocks / nodes).collect();
    let mut list = Vec::new();
    for i in 0..nodes {
        for j in i + 1..nodes {
            let p = if community[i] == community[j] {
                p_in
            } else {
                p_out
            };
            if rng.gen_bool(p) {
                list.push(Edge::new(i, j));
                list.push(Edge::new(j, i));
            }
        }
    }
    let graph = build_csr_typed(&list, nodes, false)?;
    let centroids = normal_matrix(&mut rng, blocks, features);
    let mut x = normal_matrix(&mut rng, nodes, features);
    for (i, &k) in community.iter().enumerate() {
        let c = centroids.row(k);
        for (v, m) in x.row_mut(i).iter_mut().zip(c) {
            *v = m + noise * *v;
        }
    }
    let labels = community.iter().map(|&c| c as i64).collect();
    let (train, val, test) = splits(&mut rng, nodes, train_fraction, val_fraction);
    Ok(Dataset {
        graph,
        features: x,
        labels,
        train,
        val,
        test,
    })
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(rows, cols, data).expect("sized buffer")
}

/// Random disjoint splits, each sorted ascending.
fn splits(
    rng: &mut ChaCha8Rng,
    nodes: usize,
    train: f64,
    val: f64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..nodes).collect();
    order.shuffle(rng);
    let n_train = ((nodes as f64 * train).round() as usize).clamp(1, nodes);
    let n_val = ((nodes as f64 * val).round() as usize).min(nodes - n_train);
    let mut a = order[..n_train].to_vec();
    let mut b = order[n_train..n_train + n_val].to_vec();
    let mut c = order[n_train + n_val..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    c.sort_unstable();
    (a, b, c)
}

//! A labeled graph with train/validation/test splits.

use crate::engine::config::{DataSource, PartitionSource, TrainConfig};
use crate::error::{input_err, Result};
use crate::graph::{partition_balanced, Graph, PartitionMap};
use crate::io;
use crate::synth;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: Graph,
    /// One row per node, kept in f64 and cast to the run's scalar type.
    pub features: Tensor<f64>,
    /// Class id per node, `-1` for unlabeled.
    pub labels: Vec<i64>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.labels
            .iter()
            .copied()
            .max()
            .map_or(0, |m| (m + 1).max(0) as usize)
    }

    /// Checks shapes and that every split node carries a label.
    pub fn validate(&self) -> Result<()> {
        let n = self.graph.num_nodes();
        if self.features.rows() != n {
            return Err(input_err!(
                "{} feature rows for {n} nodes",
                self.features.rows()
            ));
        }
        if self.labels.len() != n {
            return Err(input_err!("{} labels for {n} nodes", self.labels.len()));
        }
        if !self.features.all_finite() {
            return Err(input_err!("features contain non-finite values"));
        }
        for (name, split) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            for &v in split {
                if v >= n {
                    return Err(input_err!("{name} node {v} out of range"));
                }
                if self.labels[v] < 0 {
                    return Err(input_err!("{name} node {v} has no label"));
                }
            }
        }
        if self.train.is_empty() {
            return Err(input_err!("empty training split"));
        }
        Ok(())
    }

    pub fn load(cfg: &TrainConfig) -> Result<Dataset> {
        let ds = match &cfg.data {
            DataSource::Files {
                graph,
                features,
                labels,
                train,
                val,
                test,
                symmetrize,
            } => {
                let x = io::read_sarf::<f64>(features)?;
                let mut g = io::read_edge_list(graph, Some(x.rows()))?;
                if *symmetrize {
                    g = g.symmetrized()?;
                }
                let opt = |p: &Option<std::path::PathBuf>| {
                    p.as_deref().map(io::read_node_set).transpose()
                };
                Dataset {
                    graph: g,
                    features: x,
                    labels: io::read_labels(labels)?,
                    train: io::read_node_set(train)?,
                    val: opt(val)?.unwrap_or_default(),
                    test: opt(test)?.unwrap_or_default(),
                }
            }
            DataSource::Synthetic {
                spec,
                train_fraction,
                val_fraction,
            } => synth::generate(spec, *train_fraction, *val_fraction)?,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Partition map requested by `cfg` for `graph`.
pub fn load_partition(cfg: &TrainConfig, graph: &Graph) -> Result<PartitionMap> {
    let pm = match &cfg.partition {
        PartitionSource::File(path) => io::read_partition_map(path)?,
        PartitionSource::Balanced { n_parts, seed } => partition_balanced(graph, *n_parts, *seed)?,
    };
    pm.check_graph(graph)?;
    Ok(pm)
}

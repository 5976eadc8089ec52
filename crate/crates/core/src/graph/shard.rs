use std::ops::Range;

use super::{Graph, PartitionLayout, PartitionMap};
use crate::error::{input_err, Result};

/// The edges from partition `src_part` into partition `dst_part`.
///
/// Edge endpoints are local: `dst` indexes the rows of `dst_part`, `src`
/// indexes `src_global_ids`. Edges are ordered by destination, then by source
/// global id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardBlock {
    pub dst_part: usize,
    pub src_part: usize,
    pub edges: Vec<(u32, u32)>,
    pub src_global_ids: Vec<u32>,
    pub edge_type: Option<Vec<u8>>,
}

impl ShardBlock {
    pub fn empty(dst_part: usize, src_part: usize) -> Self {
        ShardBlock {
            dst_part,
            src_part,
            edges: Vec::new(),
            src_global_ids: Vec::new(),
            edge_type: None,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_src(&self) -> usize {
        self.src_global_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    #[inline]
    pub fn relation(&self, e: usize) -> u8 {
        self.edge_type.as_ref().map_or(0, |t| t[e])
    }

    /// Consecutive edge ranges sharing a destination, as `(dst, range)`.
    pub fn dst_runs(&self) -> Vec<(usize, Range<usize>)> {
        let mut runs = Vec::new();
        let mut start = 0;
        while start < self.edges.len() {
            let d = self.edges[start].0;
            let mut end = start + 1;
            while end < self.edges.len() && self.edges[end].0 == d {
                end += 1;
            }
            runs.push((d as usize, start..end));
            start = end;
        }
        runs
    }

    /// Largest number of edges sharing one destination.
    pub fn max_run(&self) -> usize {
        self.dst_runs()
            .iter()
            .map(|(_, r)| r.len())
            .max()
            .unwrap_or(0)
    }

    /// Keeps only edges whose destination is flagged in `active_dst`, and
    /// only the sources those edges still use.
    pub fn restrict_to_destinations(&self, active_dst: &[bool]) -> ShardBlock {
        let keep: Vec<usize> = (0..self.edges.len())
            .filter(|&e| active_dst[self.edges[e].0 as usize])
            .collect();
        let mut used = vec![false; self.src_global_ids.len()];
        for &e in &keep {
            used[self.edges[e].1 as usize] = true;
        }
        let mut remap = vec![u32::MAX; self.src_global_ids.len()];
        let mut src_global_ids = Vec::new();
        for (k, &u) in used.iter().enumerate() {
            if u {
                remap[k] = src_global_ids.len() as u32;
                src_global_ids.push(self.src_global_ids[k]);
            }
        }
        ShardBlock {
            dst_part: self.dst_part,
            src_part: self.src_part,
            edges: keep
                .iter()
                .map(|&e| (self.edges[e].0, remap[self.edges[e].1 as usize]))
                .collect(),
            src_global_ids,
            edge_type: self
                .edge_type
                .as_ref()
                .map(|t| keep.iter().map(|&e| t[e]).collect()),
        }
    }
}

/// The `N` shard blocks feeding partition `p`, in source-partition order.
pub fn build_shard_blocks(graph: &Graph, pm: &PartitionMap, p: usize) -> Result<Vec<ShardBlock>> {
    pm.check_graph(graph)?;
    if p >= pm.num_parts() {
        return Err(input_err!(
            "partition {p} out of range for {} partitions",
            pm.num_parts()
        ));
    }
    let layout = PartitionLayout::new(pm);
    Ok(blocks_into(graph, &layout, p))
}

/// Shard blocks for every destination partition: `result[p][q]`.
pub fn build_all_shard_blocks(graph: &Graph, pm: &PartitionMap) -> Result<Vec<Vec<ShardBlock>>> {
    pm.check_graph(graph)?;
    let layout = PartitionLayout::new(pm);
    Ok((0..pm.num_parts())
        .map(|p| blocks_into(graph, &layout, p))
        .collect())
}

fn blocks_into(graph: &Graph, layout: &PartitionLayout, p: usize) -> Vec<ShardBlock> {
    let n_parts = layout.num_parts();
    let typed = graph.edge_types().is_some();
    // (dst_local, src_global, rel) per source partition, already ordered by
    // destination then source because the CSR is.
    let mut raw: Vec<Vec<(u32, u32, u8)>> = vec![Vec::new(); n_parts];
    for (i, &dst) in layout.members(p).iter().enumerate() {
        let dst = dst as usize;
        for e in graph.indptr()[dst]..graph.indptr()[dst + 1] {
            let src = graph.indices()[e];
            let q = layout.part_of(src as usize);
            raw[q].push((i as u32, src, graph.relation(e)));
        }
    }
    raw.into_iter()
        .enumerate()
        .map(|(q, list)| {
            let mut src_global_ids: Vec<u32> = list.iter().map(|t| t.1).collect();
            src_global_ids.sort_unstable();
            src_global_ids.dedup();
            let edges = list
                .iter()
                .map(|&(d, s, _)| {
                    let k = src_global_ids.binary_search(&s).expect("source present");
                    (d, k as u32)
                })
                .collect();
            ShardBlock {
                dst_part: p,
                src_part: q,
                edges,
                src_global_ids,
                edge_type: typed.then(|| list.iter().map(|t| t.2).collect()),
            }
        })
        .collect()
}

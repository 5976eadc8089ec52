//! Graph storage, partitioning and per-partition-pair shard blocks.

mod layout;
mod mfg;
mod partition;
mod shard;

pub use layout::PartitionLayout;
pub use mfg::compute_mfg_masks;
pub use partition::{edge_cut, partition_balanced, PartitionMap};
pub use shard::{build_all_shard_blocks, build_shard_blocks, ShardBlock};

use crate::error::{input_err, Result};

/// One input edge `src -> dst`, optionally typed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub rel: u8,
}

impl Edge {
    pub fn new(src: usize, dst: usize) -> Self {
        Edge { src, dst, rel: 0 }
    }

    pub fn typed(src: usize, dst: usize, rel: u8) -> Self {
        Edge { src, dst, rel }
    }
}

/// Directed graph in CSR form grouped by destination: the in-neighbours of
/// node `i` are `indices[indptr[i]..indptr[i + 1]]`, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    edge_type: Option<Vec<u8>>,
    num_relations: usize,
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.indices.len()
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn edge_types(&self) -> Option<&[u8]> {
        self.edge_type.as_deref()
    }

    /// Sources of the edges entering `node`.
    pub fn in_neighbors(&self, node: usize) -> &[u32] {
        &self.indices[self.indptr[node]..self.indptr[node + 1]]
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.indptr[node + 1] - self.indptr[node]
    }

    /// Relation id of edge slot `e` (0 for untyped graphs).
    #[inline]
    pub fn relation(&self, e: usize) -> u8 {
        self.edge_type.as_ref().map_or(0, |t| t[e])
    }

    /// In-degree of `node` restricted to relation `rel`.
    pub fn in_degree_rel(&self, node: usize, rel: u8) -> usize {
        (self.indptr[node]..self.indptr[node + 1])
            .filter(|&e| self.relation(e) == rel)
            .count()
    }

    /// Iterates `(src, dst, rel)` over all edges in CSR order.
    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        (0..self.num_nodes).flat_map(move |dst| {
            (self.indptr[dst]..self.indptr[dst + 1])
                .map(move |e| Edge::typed(self.indices[e] as usize, dst, self.relation(e)))
        })
    }

    /// Adds the reverse of every edge (keeping relation ids).
    pub fn symmetrized(&self) -> Result<Graph> {
        let mut edges: Vec<Edge> = self.edges().collect();
        let rev: Vec<Edge> = edges
            .iter()
            .filter(|e| e.src != e.dst)
            .map(|e| Edge::typed(e.dst, e.src, e.rel))
            .collect();
        edges.extend(rev);
        build_csr_typed(&edges, self.num_nodes, self.edge_type.is_some())
    }
}

/// Builds a homogeneous graph (relation ids ignored).
pub fn build_csr(edges: &[(usize, usize)], num_nodes: usize) -> Result<Graph> {
    let edges: Vec<Edge> = edges.iter().map(|&(s, d)| Edge::new(s, d)).collect();
    build_csr_typed(&edges, num_nodes, false)
}

/// Builds a CSR grouped by destination with ascending sources per
/// destination. Duplicate edges are kept. When `typed` is set the relation
/// ids are stored and `num_relations = max(rel) + 1`.
pub fn build_csr_typed(edges: &[Edge], num_nodes: usize, typed: bool) -> Result<Graph> {
    if num_nodes > u32::MAX as usize {
        return Err(input_err!("graph with {num_nodes} nodes exceeds u32 ids"));
    }
    for e in edges {
        if e.src >= num_nodes || e.dst >= num_nodes {
            return Err(input_err!(
                "edge ({}, {}) out of range for {} nodes",
                e.src,
                e.dst,
                num_nodes
            ));
        }
    }
    let mut counts = vec![0usize; num_nodes + 1];
    for e in edges {
        counts[e.dst + 1] += 1;
    }
    for i in 0..num_nodes {
        counts[i + 1] += counts[i];
    }
    let indptr = counts.clone();
    let mut cursor = counts;
    let mut slots: Vec<(u32, u8)> = vec![(0, 0); edges.len()];
    for e in edges {
        let pos = cursor[e.dst];
        slots[pos] = (e.src as u32, e.rel);
        cursor[e.dst] += 1;
    }
    for dst in 0..num_nodes {
        slots[indptr[dst]..indptr[dst + 1]].sort_unstable();
    }
    let indices = slots.iter().map(|s| s.0).collect();
    let (edge_type, num_relations) = if typed {
        let r = slots.iter().map(|s| s.1 as usize + 1).max().unwrap_or(1);
        (Some(slots.iter().map(|s| s.1).collect()), r)
    } else {
        (None, 1)
    };
    Ok(Graph {
        num_nodes,
        indptr,
        indices,
        edge_type,
        num_relations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_cycle() {
        let g = build_csr(&[(0, 1), (1, 0)], 2).unwrap();
        assert_eq!(g.indptr(), &[0, 1, 2]);
        assert_eq!(g.indices(), &[1, 0]);
    }

    #[test]
    fn empty_graph() {
        let g = build_csr(&[], 3).unwrap();
        assert_eq!(g.indptr(), &[0, 0, 0, 0]);
        assert!(g.indices().is_empty());
    }

    #[test]
    fn sources_sorted_per_destination() {
        let g = build_csr(&[(2, 0), (1, 0), (0, 1)], 3).unwrap();
        assert_eq!(g.indptr(), &[0, 2, 3, 3]);
        assert_eq!(g.indices(), &[1, 2, 0]);
    }

    #[test]
    fn duplicates_and_self_loops_are_kept() {
        let g = build_csr(&[(1, 0), (1, 0), (0, 0)], 2).unwrap();
        assert_eq!(g.in_neighbors(0), &[0, 1, 1]);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(matches!(
            build_csr(&[(0, 3)], 3),
            Err(crate::Error::Input(_))
        ));
    }

    #[test]
    fn typed_edges_track_relations() {
        let g = build_csr_typed(
            &[
                Edge::typed(1, 0, 1),
                Edge::typed(2, 0, 0),
                Edge::typed(0, 2, 1),
            ],
            3,
            true,
        )
        .unwrap();
        assert_eq!(g.num_relations(), 2);
        assert_eq!(g.in_degree_rel(0, 0), 1);
        assert_eq!(g.in_degree_rel(0, 1), 1);
        assert_eq!(g.relation(0), 1);
    }
}

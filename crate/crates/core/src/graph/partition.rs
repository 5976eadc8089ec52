use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Graph;
use crate::error::{input_err, Result};

/// Node-to-partition assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionMap {
    assignment: Vec<u32>,
    num_parts: usize,
}

impl PartitionMap {
    pub fn new(assignment: Vec<u32>, num_parts: usize) -> Result<Self> {
        if num_parts == 0 {
            return Err(input_err!("partition count must be at least 1"));
        }
        if let Some((node, &p)) = assignment
            .iter()
            .enumerate()
            .find(|(_, &p)| p as usize >= num_parts)
        {
            return Err(input_err!(
                "node {node} assigned to partition {p} but only {num_parts} partitions exist"
            ));
        }
        Ok(PartitionMap {
            assignment,
            num_parts,
        })
    }

    /// Infers the partition count as `max(id) + 1`.
    pub fn from_assignment(assignment: Vec<u32>) -> Result<Self> {
        let n = assignment
            .iter()
            .map(|&p| p as usize + 1)
            .max()
            .unwrap_or(1);
        Self::new(assignment, n)
    }

    pub fn single(num_nodes: usize) -> Self {
        PartitionMap {
            assignment: vec![0; num_nodes],
            num_parts: 1,
        }
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }

    pub fn num_nodes(&self) -> usize {
        self.assignment.len()
    }

    #[inline]
    pub fn part_of(&self, node: usize) -> usize {
        self.assignment[node] as usize
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn part_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_parts];
        for &p in &self.assignment {
            sizes[p as usize] += 1;
        }
        sizes
    }

    /// Global ids of the nodes in partition `p`, ascending.
    pub fn nodes_of(&self, p: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &q)| q as usize == p)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn check_graph(&self, graph: &Graph) -> Result<()> {
        if self.assignment.len() != graph.num_nodes() {
            return Err(input_err!(
                "partition map covers {} nodes but graph has {}",
                self.assignment.len(),
                graph.num_nodes()
            ));
        }
        Ok(())
    }
}

/// Number of edges whose endpoints live in different partitions.
pub fn edge_cut(graph: &Graph, pm: &PartitionMap) -> usize {
    graph
        .edges()
        .filter(|e| pm.part_of(e.src) != pm.part_of(e.dst))
        .count()
}

/// Balanced partitioning by seeded multi-source BFS growth.
///
/// Part `k` may hold at most `n / parts` nodes (plus one for the first
/// `n % parts` parts), so sizes never differ by more than one. Each part grows
/// from a random seed over the undirected view of the graph, taking turns
/// claiming one node at a time. Nodes no BFS front reaches are dealt
/// round-robin to parts that still have room.
pub fn partition_balanced(graph: &Graph, n_parts: usize, seed: u64) -> Result<PartitionMap> {
    let n = graph.num_nodes();
    if n_parts == 0 {
        return Err(input_err!("partition count must be at least 1"));
    }
    if n_parts > n {
        return Err(input_err!(
            "cannot split {n} nodes into {n_parts} non-empty partitions"
        ));
    }
    if n_parts == 1 {
        return Ok(PartitionMap::single(n));
    }

    // Undirected adjacency with sorted, deduplicated neighbour lists.
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
    for e in graph.edges() {
        if e.src != e.dst {
            adj[e.src].push(e.dst as u32);
            adj[e.dst].push(e.src as u32);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }

    let capacity: Vec<usize> = (0..n_parts)
        .map(|k| n / n_parts + usize::from(k < n % n_parts))
        .collect();
    const UNASSIGNED: u32 = u32::MAX;
    let mut assignment = vec![UNASSIGNED; n];
    let mut sizes = vec![0usize; n_parts];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut fronts: Vec<VecDeque<usize>> = vec![VecDeque::new(); n_parts];
    for (k, &s) in order.iter().take(n_parts).enumerate() {
        assignment[s] = k as u32;
        sizes[k] = 1;
        fronts[k].push_back(s);
    }

    loop {
        let mut progressed = false;
        for k in 0..n_parts {
            if sizes[k] >= capacity[k] {
                continue;
            }
            // Claim the next unassigned neighbour reachable from this front.
            'claim: while let Some(&u) = fronts[k].front() {
                for &v in &adj[u] {
                    let v = v as usize;
                    if assignment[v] == UNASSIGNED {
                        assignment[v] = k as u32;
                        sizes[k] += 1;
                        fronts[k].push_back(v);
                        progressed = true;
                        break 'claim;
                    }
                }
                fronts[k].pop_front();
            }
        }
        if !progressed {
            break;
        }
    }

    // Round-robin fallback for nodes no front reached.
    let mut k = 0;
    for &node in &order {
        if assignment[node] != UNASSIGNED {
            continue;
        }
        while sizes[k] >= capacity[k] {
            k = (k + 1) % n_parts;
        }
        assignment[node] = k as u32;
        sizes[k] += 1;
        k = (k + 1) % n_parts;
    }

    PartitionMap::new(assignment, n_parts)
}

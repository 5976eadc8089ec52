use super::Graph;

/// Per-layer active node sets for a `num_layers`-deep network whose loss only
/// reads `labeled` nodes.
///
/// `masks[num_layers]` is `labeled`; `masks[l]` adds the in-neighbours of
/// `masks[l + 1]`. Layer `l` only needs outputs at `masks[l]`.
pub fn compute_mfg_masks(graph: &Graph, labeled: &[usize], num_layers: usize) -> Vec<Vec<bool>> {
    let n = graph.num_nodes();
    let mut masks = vec![vec![false; n]; num_layers + 1];
    for &v in labeled {
        masks[num_layers][v] = true;
    }
    for l in (0..num_layers).rev() {
        let mut next = masks[l + 1].clone();
        for (v, &active) in masks[l + 1].iter().enumerate() {
            if active {
                for &u in graph.in_neighbors(v) {
                    next[u as usize] = true;
                }
            }
        }
        masks[l] = next;
    }
    masks
}

use super::PartitionMap;

/// Canonical local numbering of every partition: the nodes of partition `p`
/// in ascending global id order, plus the inverse map.
#[derive(Debug, Clone)]
pub struct PartitionLayout {
    members: Vec<Vec<u32>>,
    part_of: Vec<u32>,
    local_index: Vec<u32>,
}

impl PartitionLayout {
    pub fn new(pm: &PartitionMap) -> Self {
        let mut members = vec![Vec::new(); pm.num_parts()];
        let mut local_index = vec![0u32; pm.num_nodes()];
        for (node, &p) in pm.assignment().iter().enumerate() {
            let list = &mut members[p as usize];
            local_index[node] = list.len() as u32;
            list.push(node as u32);
        }
        PartitionLayout {
            members,
            part_of: pm.assignment().to_vec(),
            local_index,
        }
    }

    pub fn num_parts(&self) -> usize {
        self.members.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.part_of.len()
    }

    /// Global ids owned by partition `p`, ascending.
    pub fn members(&self, p: usize) -> &[u32] {
        &self.members[p]
    }

    pub fn part_size(&self, p: usize) -> usize {
        self.members[p].len()
    }

    #[inline]
    pub fn part_of(&self, node: usize) -> usize {
        self.part_of[node] as usize
    }

    /// Row of `node` inside its owning partition.
    #[inline]
    pub fn local_index(&self, node: usize) -> usize {
        self.local_index[node] as usize
    }
}

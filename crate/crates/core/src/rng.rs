//! Stateless counter-based randomness.
//!
//! Dropout masks must be identical no matter how nodes are spread over
//! workers, so each draw is a pure function of `(seed, layer, epoch, node,
//! column)` instead of a position in a sequential stream.

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key for one dropout site in one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u32,
    pub epoch: u32,
}

impl DropoutKey {
    fn base(&self) -> u64 {
        let mut h = splitmix64(self.seed ^ 0xD1B5_4A32_D192_ED03);
        h = splitmix64(h ^ self.layer as u64);
        splitmix64(h ^ ((self.epoch as u64) << 32))
    }

    /// Uniform draw in `[0, 1)` for element `(node, col)`.
    pub fn uniform(&self, node: u64, col: u64) -> f64 {
        self.uniform_with_base(self.base(), node, col)
    }

    #[inline]
    fn uniform_with_base(&self, base: u64, node: u64, col: u64) -> f64 {
        let h = splitmix64(splitmix64(base ^ node) ^ col.wrapping_mul(0xA24B_AED4_963E_E407));
        (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Keep flags for rows identified by global node ids.
    pub fn keep_mask(&self, node_ids: &[u32], cols: usize, p: f64) -> Vec<bool> {
        let base = self.base();
        let mut out = Vec::with_capacity(node_ids.len() * cols);
        for &node in node_ids {
            for c in 0..cols {
                out.push(self.uniform_with_base(base, node as u64, c as u64) >= p);
            }
        }
        out
    }
}

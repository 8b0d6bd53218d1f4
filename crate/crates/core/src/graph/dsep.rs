//! d-separation by reachability (Bayes ball).

use super::{ConditioningSet, NodeId, TemporalGraph};
use crate::error::{Error, Result};

impl TemporalGraph {
    /// Marks every node that is in `z` or has a descendant in `z`.
    pub(crate) fn ancestor_mask(&self, z: &[usize]) -> Vec<bool> {
        let mut mask = vec![false; self.node_count()];
        let mut stack: Vec<usize> = z.to_vec();
        while let Some(u) = stack.pop() {
            if mask[u] {
                continue;
            }
            mask[u] = true;
            stack.extend(self.parent_ix(u).iter().copied().filter(|&p| !mask[p]));
        }
        mask
    }

    pub(crate) fn resolve_query(
        &self,
        x: &NodeId,
        y: &NodeId,
        z: &ConditioningSet,
    ) -> Result<(usize, usize, Vec<bool>)> {
        let xi = self.index_of(x)?;
        let yi = self.index_of(y)?;
        if xi == yi {
            return Err(Error::InvalidArgument(format!("query endpoints coincide ({x})")));
        }
        let mut in_z = vec![false; self.node_count()];
        for node in z.nodes() {
            in_z[self.index_of(node)?] = true;
        }
        if in_z[xi] || in_z[yi] {
            return Err(Error::InvalidArgument(format!(
                "query endpoints {x}, {y} must not be in the conditioning set {z}"
            )));
        }
        Ok((xi, yi, in_z))
    }

    /// True iff `x` and `y` are d-separated given `z`.
    pub fn d_separated(&self, x: &NodeId, y: &NodeId, z: &ConditioningSet) -> Result<bool> {
        let (xi, yi, in_z) = self.resolve_query(x, y, z)?;
        let reach = self.reachable_from(xi, &in_z);
        Ok(!reach[yi])
    }

    /// Nodes reachable from `source` along an active trail given `in_z`.
    fn reachable_from(&self, source: usize, in_z: &[bool]) -> Vec<bool> {
        let n = self.node_count();
        let z_ix: Vec<usize> = (0..n).filter(|&i| in_z[i]).collect();
        let anc = self.ancestor_mask(&z_ix);

        // visited[node][0]: entered from a child (moving up),
        // visited[node][1]: entered from a parent (moving down).
        let mut visited = vec![[false; 2]; n];
        let mut reachable = vec![false; n];
        let mut stack = vec![(source, 0usize)];
        while let Some((u, dir)) = stack.pop() {
            if visited[u][dir] {
                continue;
            }
            visited[u][dir] = true;
            if !in_z[u] {
                reachable[u] = true;
            }
            if dir == 0 {
                if !in_z[u] {
                    stack.extend(self.parent_ix(u).iter().map(|&p| (p, 0)));
                    stack.extend(self.child_ix(u).iter().map(|&c| (c, 1)));
                }
            } else {
                if !in_z[u] {
                    stack.extend(self.child_ix(u).iter().map(|&c| (c, 1)));
                }
                if anc[u] {
                    stack.extend(self.parent_ix(u).iter().map(|&p| (p, 0)));
                }
            }
        }
        reachable
    }
}

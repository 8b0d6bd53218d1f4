//! Enumeration of d-connecting paths and their classification against the
//! canonical band-query shapes.

use std::fmt;

use serde::Serialize;

use super::{ConditioningSet, NodeId, TemporalGraph};
use crate::error::{Error, Result};

/// A simple path with edge orientations and per-node collider tags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConnectingPath {
    pub nodes: Vec<NodeId>,
    /// `forward[e]` is true when edge `e` points from `nodes[e]` to `nodes[e+1]`.
    pub forward: Vec<bool>,
    /// Collider tag per node; endpoints are never colliders.
    pub colliders: Vec<bool>,
}

impl ConnectingPath {
    /// Length in edges.
    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn task_nodes(&self) -> Vec<NodeId> {
        self.nodes.iter().copied().filter(NodeId::is_task).collect()
    }
}

impl fmt::Display for ConnectingPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.nodes[0])?;
        for (e, node) in self.nodes[1..].iter().enumerate() {
            let arrow = if self.forward[e] { "->" } else { "<-" };
            write!(f, " {arrow} {node}")?;
        }
        Ok(())
    }
}

impl TemporalGraph {
    /// All simple paths between `x` and `y` with at most `max_len` edges that
    /// are d-connecting given `z`. Partial paths are pruned as soon as an
    /// interior node blocks, which keeps the search small under band sets.
    pub fn enumerate_connecting_paths(
        &self,
        x: &NodeId,
        y: &NodeId,
        z: &ConditioningSet,
        max_len: usize,
    ) -> Result<Vec<ConnectingPath>> {
        if max_len < 4 {
            return Err(Error::InvalidArgument(format!("max_len must be >= 4, got {max_len}")));
        }
        let (xi, yi, in_z) = self.resolve_query(x, y, z)?;
        let z_ix: Vec<usize> = (0..self.node_count()).filter(|&i| in_z[i]).collect();
        let anc = self.ancestor_mask(&z_ix);

        let mut search = PathSearch {
            graph: self,
            target: yi,
            in_z: &in_z,
            anc: &anc,
            max_len,
            nodes: vec![xi],
            forward: Vec::new(),
            colliders: vec![false],
            on_path: vec![false; self.node_count()],
            out: Vec::new(),
        };
        search.on_path[xi] = true;
        search.extend();
        Ok(search.out)
    }
}

struct PathSearch<'a> {
    graph: &'a TemporalGraph,
    target: usize,
    in_z: &'a [bool],
    anc: &'a [bool],
    max_len: usize,
    nodes: Vec<usize>,
    forward: Vec<bool>,
    colliders: Vec<bool>,
    on_path: Vec<bool>,
    out: Vec<ConnectingPath>,
}

impl PathSearch<'_> {
    fn extend(&mut self) {
        if self.forward.len() == self.max_len {
            return;
        }
        let u = *self.nodes.last().expect("path never empty");
        let arrived_into_u = self.forward.last().copied();
        let steps: Vec<(usize, bool)> = self
            .graph
            .child_ix(u)
            .iter()
            .map(|&c| (c, true))
            .chain(self.graph.parent_ix(u).iter().map(|&p| (p, false)))
            .collect();
        for (w, fwd) in steps {
            if self.on_path[w] {
                continue;
            }
            // u is interior once we leave it again: check whether it blocks.
            let collider = match arrived_into_u {
                None => false,
                Some(into_u) => into_u && !fwd,
            };
            if arrived_into_u.is_some() {
                let blocks = if collider { !self.anc[u] } else { self.in_z[u] };
                if blocks {
                    continue;
                }
            }
            let last = self.colliders.len() - 1;
            let saved = self.colliders[last];
            self.colliders[last] = collider;
            self.nodes.push(w);
            self.forward.push(fwd);
            self.colliders.push(false);
            if w == self.target {
                self.record();
            } else {
                self.on_path[w] = true;
                self.extend();
                self.on_path[w] = false;
            }
            self.colliders.pop();
            self.forward.pop();
            self.nodes.pop();
            self.colliders[last] = saved;
        }
    }

    fn record(&mut self) {
        self.out.push(ConnectingPath {
            nodes: self.nodes.iter().map(|&i| self.graph.node_at(i)).collect(),
            forward: self.forward.clone(),
            colliders: self.colliders.clone(),
        });
    }
}

/// The four canonical band-path forms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum BandForm {
    /// `s_j -> a_j -> g <- a_q <- s_q`
    OwnOwn,
    /// `s_j -> a_j -> g <- a_{q-1} -> s_q`
    OwnPrev,
    /// `s_j <- a_{j-1} -> g <- a_q <- s_q`
    PrevOwn,
    /// `s_j <- a_{j-1} -> g <- a_{q-1} -> s_q`
    PrevPrev,
}

/// How a path leaves the left representative `s_j` towards the task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum LeftFragment {
    /// `s_j -> a_j -> g`
    OwnAction,
    /// `s_j <- a_{j-1} -> g`
    PrevAction,
    /// `s_j -> s_{j+1} <- a_j -> g`, through the conditioned collider `s_{j+1}`.
    Detour,
}

/// How a path enters the right representative `s_q` from the task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum RightFragment {
    /// `g <- a_q <- s_q`
    OwnAction,
    /// `g <- a_{q-1} -> s_q`
    PrevAction,
    /// `g <- a_q -> s_{q+1} <- s_q`, through the conditioned collider `s_{q+1}`.
    Detour,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct PathShape {
    pub left: LeftFragment,
    pub right: RightFragment,
}

impl PathShape {
    /// The canonical form, or `None` for shapes that pass through a
    /// conditioned collider state.
    pub fn canonical_form(&self) -> Option<BandForm> {
        use LeftFragment as L;
        use RightFragment as R;
        match (self.left, self.right) {
            (L::OwnAction, R::OwnAction) => Some(BandForm::OwnOwn),
            (L::OwnAction, R::PrevAction) => Some(BandForm::OwnPrev),
            (L::PrevAction, R::OwnAction) => Some(BandForm::PrevOwn),
            (L::PrevAction, R::PrevAction) => Some(BandForm::PrevPrev),
            _ => None,
        }
    }
}

type Step = (NodeId, Option<bool>);

fn matches(path: &ConnectingPath, pattern: &[Step]) -> bool {
    // pattern[n] = (node, orientation of edge n -> n+1) with None for the last node
    path.nodes.len() == pattern.len()
        && pattern.iter().enumerate().all(|(n, (node, dir))| {
            path.nodes[n] == *node && dir.is_none_or(|d| path.forward[n] == d)
        })
}

/// Classifies a path between `s_j` and `s_q` through task `g_task` into one
/// of the nine left/right fragment combinations, or `None` when it matches
/// none of them.
pub fn classify_band_path(path: &ConnectingPath, j: usize, q: usize, task: usize) -> Option<PathShape> {
    let s = NodeId::state;
    let a = NodeId::action;
    let g = NodeId::task(task);
    if path.nodes.first() != Some(&s(j)) || path.nodes.last() != Some(&s(q)) {
        return None;
    }
    let lefts: [(LeftFragment, Vec<Step>); 3] = [
        (LeftFragment::OwnAction, vec![(s(j), Some(true)), (a(j), Some(true))]),
        (LeftFragment::PrevAction, vec![(s(j), Some(false)), (a(j.wrapping_sub(1)), Some(true))]),
        (
            LeftFragment::Detour,
            vec![(s(j), Some(true)), (s(j + 1), Some(false)), (a(j), Some(true))],
        ),
    ];
    let rights: [(RightFragment, Vec<Step>); 3] = [
        (RightFragment::OwnAction, vec![(g, Some(false)), (a(q), Some(false)), (s(q), None)]),
        (RightFragment::PrevAction, vec![(g, Some(false)), (a(q - 1), Some(true)), (s(q), None)]),
        (
            RightFragment::Detour,
            vec![(g, Some(false)), (a(q), Some(true)), (s(q + 1), Some(false)), (s(q), None)],
        ),
    ];
    for (lf, lpat) in &lefts {
        for (rf, rpat) in &rights {
            let pattern: Vec<Step> = lpat.iter().chain(rpat.iter()).copied().collect();
            if matches(path, &pattern) {
                return Some(PathShape { left: *lf, right: *rf });
            }
        }
    }
    None
}

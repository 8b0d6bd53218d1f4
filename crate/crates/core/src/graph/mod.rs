//! Temporal task DAG over states, actions and tasks.
//!
//! Time steps `t`, segments `k` and tasks `i` are 1-based throughout, so
//! `s[t]` for `t in 1..=T`, segment `k` covers steps `(k-1)L+1 ..= kL`, and
//! tasks are `g[1] ..= g[M]`.

mod dsep;
mod paths;
mod random;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use paths::{classify_band_path, BandForm, ConnectingPath, LeftFragment, PathShape, RightFragment};
pub use random::{random_graph, RandomGraphConfig};

/// Default cap on path length (in edges) for connecting-path enumeration.
pub const DEFAULT_MAX_PATH_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    State,
    Action,
    Task,
}

/// A node of the temporal graph. `index` is a time step for states and
/// actions and a task id for tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub kind: NodeKind,
    pub index: usize,
}

impl NodeId {
    pub const fn state(t: usize) -> Self {
        NodeId { kind: NodeKind::State, index: t }
    }

    pub const fn action(t: usize) -> Self {
        NodeId { kind: NodeKind::Action, index: t }
    }

    pub const fn task(i: usize) -> Self {
        NodeId { kind: NodeKind::Task, index: i }
    }

    pub fn is_task(&self) -> bool {
        self.kind == NodeKind::Task
    }

    fn order_key(&self) -> (bool, usize, u8) {
        let rank = match self.kind {
            NodeKind::State => 0,
            NodeKind::Action => 1,
            NodeKind::Task => 2,
        };
        (self.is_task(), self.index, rank)
    }
}

// s[1] < a[1] < s[2] < a[2] < ... < s[T] < a[T] < g[1] < ... < g[M]
impl Ord for NodeId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.order_key().cmp(&other.order_key())
    }
}

impl PartialOrd for NodeId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = match self.kind {
            NodeKind::State => 's',
            NodeKind::Action => 'a',
            NodeKind::Task => 'g',
        };
        write!(f, "{}[{}]", prefix, self.index)
    }
}

impl FromStr for NodeId {
    type Err = Error;

    /// Accepts `s[4]`, `a[4]`, `g[1]` as well as the bare `s4` form.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let mut chars = s.chars();
        let kind = match chars.next() {
            Some('s') => NodeKind::State,
            Some('a') => NodeKind::Action,
            Some('g') => NodeKind::Task,
            _ => return Err(Error::Parse(format!("bad node id '{s}'"))),
        };
        let rest = chars.as_str();
        let digits = rest
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .unwrap_or(rest);
        let index = digits
            .parse::<usize>()
            .map_err(|_| Error::Parse(format!("bad node id '{s}'")))?;
        Ok(NodeId { kind, index })
    }
}

/// N x M boolean segment-task relevance matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskIncidence {
    matrix: Vec<Vec<bool>>,
    n_tasks: usize,
}

impl TaskIncidence {
    pub fn zeros(n_segments: usize, n_tasks: usize) -> Self {
        TaskIncidence {
            matrix: vec![vec![false; n_tasks]; n_segments],
            n_tasks,
        }
    }

    pub fn from_rows(rows: Vec<Vec<bool>>, n_tasks: usize) -> Result<Self> {
        if let Some(bad) = rows.iter().position(|r| r.len() != n_tasks) {
            return Err(Error::InvalidGraph(format!(
                "incidence row {} has {} entries, expected {}",
                bad + 1,
                rows[bad].len(),
                n_tasks
            )));
        }
        Ok(TaskIncidence { matrix: rows, n_tasks })
    }

    /// Builds an incidence from 1-based `(segment, task)` pairs.
    pub fn from_pairs(n_segments: usize, n_tasks: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut inc = Self::zeros(n_segments, n_tasks);
        for &(k, i) in pairs {
            if k == 0 || k > n_segments || i == 0 || i > n_tasks {
                return Err(Error::InvalidGraph(format!(
                    "incidence pair [{k}, {i}] out of range (N = {n_segments}, M = {n_tasks})"
                )));
            }
            inc.set(k, i, true);
        }
        Ok(inc)
    }

    pub fn n_segments(&self) -> usize {
        self.matrix.len()
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn get(&self, k: usize, i: usize) -> bool {
        self.matrix[k - 1][i - 1]
    }

    pub fn set(&mut self, k: usize, i: usize, value: bool) {
        self.matrix[k - 1][i - 1] = value;
    }

    pub fn rows(&self) -> &[Vec<bool>] {
        &self.matrix
    }

    pub fn column_count(&self, i: usize) -> usize {
        self.matrix.iter().filter(|row| row[i - 1]).count()
    }

    pub fn tasks_of(&self, k: usize) -> BTreeSet<usize> {
        (1..=self.n_tasks).filter(|&i| self.get(k, i)).collect()
    }

    /// 1-based `(segment, task)` pairs of the true cells, row-major.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for k in 1..=self.n_segments() {
            for i in 1..=self.n_tasks {
                if self.get(k, i) {
                    out.push((k, i));
                }
            }
        }
        out
    }

    /// Appends `extra` all-false task columns.
    pub fn with_extra_columns(&self, extra: usize) -> Self {
        let matrix = self
            .matrix
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.extend(std::iter::repeat_n(false, extra));
                r
            })
            .collect();
        TaskIncidence {
            matrix,
            n_tasks: self.n_tasks + extra,
        }
    }
}

impl fmt::Display for TaskIncidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, row) in self.matrix.iter().enumerate() {
            let cells: String = row.iter().map(|&b| if b { '1' } else { '.' }).collect();
            writeln!(f, "S{:<3} {}", k + 1, cells)?;
        }
        Ok(())
    }
}

/// Ordered set of conditioning nodes without duplicates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ConditioningSet(Vec<NodeId>);

impl ConditioningSet {
    pub fn empty() -> Self {
        ConditioningSet(Vec::new())
    }

    pub fn new(nodes: impl IntoIterator<Item = NodeId>) -> Result<Self> {
        let mut v: Vec<NodeId> = nodes.into_iter().collect();
        v.sort();
        if let Some(w) = v.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!(
                "duplicate node {} in conditioning set",
                w[0]
            )));
        }
        Ok(ConditioningSet(v))
    }

    fn from_dedup(nodes: impl IntoIterator<Item = NodeId>) -> Self {
        let set: BTreeSet<NodeId> = nodes.into_iter().collect();
        ConditioningSet(set.into_iter().collect())
    }

    pub fn contains(&self, node: &NodeId) -> bool {
        self.0.binary_search(node).is_ok()
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn without(&self, node: &NodeId) -> Self {
        ConditioningSet(self.0.iter().copied().filter(|n| n != node).collect())
    }

    pub fn with(&self, node: NodeId) -> Self {
        Self::from_dedup(self.0.iter().copied().chain(std::iter::once(node)))
    }
}

impl fmt::Display for ConditioningSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (n, node) in self.0.iter().enumerate() {
            if n > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{node}")?;
        }
        write!(f, "}}")
    }
}

/// Band conditioning set for segments `k < v` and task `i`:
/// `{s[kL-1], s[kL+1], s[vL-1], s[vL+1]}` restricted to `1..=T`, plus `g[i]`.
pub fn band_set(k: usize, v: usize, i: usize, seg_len: usize, steps: usize) -> Result<ConditioningSet> {
    if k == 0 || k >= v {
        return Err(Error::InvalidArgument(format!("band set needs 1 <= k < v, got k={k}, v={v}")));
    }
    if i == 0 {
        return Err(Error::InvalidArgument("task ids are 1-based".into()));
    }
    if seg_len < 2 || v * seg_len > steps {
        return Err(Error::InvalidArgument(format!(
            "segment {v} with L={seg_len} exceeds T={steps}"
        )));
    }
    let (kl, vl) = (k * seg_len, v * seg_len);
    let states = [kl - 1, kl + 1, vl - 1, vl + 1]
        .into_iter()
        .filter(|&t| t >= 1 && t <= steps)
        .map(NodeId::state);
    Ok(ConditioningSet::from_dedup(states.chain(std::iter::once(NodeId::task(i)))))
}

/// Local band set around representatives `j < q`:
/// `{s[j-1], s[j+1], s[q-1], s[q+1]}` restricted to `1..=T`, plus `g[i]`.
///
/// The representatives themselves are removed from the set, which only
/// matters when `q = j + 1`.
pub fn local_band_set(j: usize, q: usize, i: usize, steps: usize) -> Result<ConditioningSet> {
    if j == 0 || j >= q || q > steps {
        return Err(Error::InvalidArgument(format!(
            "local band set needs 1 <= j < q <= T, got j={j}, q={q}, T={steps}"
        )));
    }
    if i == 0 {
        return Err(Error::InvalidArgument("task ids are 1-based".into()));
    }
    let states = [j.wrapping_sub(1), j + 1, q - 1, q + 1]
        .into_iter()
        .filter(|&t| t >= 1 && t <= steps && t != j && t != q)
        .map(NodeId::state);
    Ok(ConditioningSet::from_dedup(states.chain(std::iter::once(NodeId::task(i)))))
}

/// Temporal task DAG. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGraph {
    steps: usize,
    seg_len: usize,
    n_tasks: usize,
    connected: Vec<bool>,
    incidence: TaskIncidence,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
}

impl TemporalGraph {
    /// Builds the graph from its parameters. `connected[t-1]` states whether
    /// boundary `t -> t+1` is connected.
    ///
    /// Edges: `s_t -> a_t` always; `s_t -> s_{t+1}` and `a_t -> s_{t+1}` iff the
    /// boundary is connected; `a_t -> g_i` iff task `i` is relevant to the
    /// segment containing `t`.
    pub fn build(
        steps: usize,
        seg_len: usize,
        n_tasks: usize,
        incidence: TaskIncidence,
        connected: Vec<bool>,
    ) -> Result<Self> {
        Self::validate_layout(steps, seg_len)?;
        let n_segments = steps / seg_len;
        if incidence.n_segments() != n_segments || incidence.n_tasks() != n_tasks {
            return Err(Error::InvalidGraph(format!(
                "incidence is {}x{}, expected {}x{}",
                incidence.n_segments(),
                incidence.n_tasks(),
                n_segments,
                n_tasks
            )));
        }
        for i in 1..=n_tasks {
            let c = incidence.column_count(i);
            if c < 2 {
                return Err(Error::InvalidGraph(format!(
                    "task {i} is relevant to {c} segment(s); each task must appear in at least two"
                )));
            }
        }
        if connected.len() != steps - 1 {
            return Err(Error::InvalidGraph(format!(
                "boundary list has length {}, expected T-1 = {}",
                connected.len(),
                steps - 1
            )));
        }
        Ok(Self::assemble(steps, seg_len, incidence, connected))
    }

    /// Builds the graph from a list of disconnected boundaries `t` (meaning
    /// `t -> t+1` is cut).
    pub fn from_disconnected(
        steps: usize,
        seg_len: usize,
        n_tasks: usize,
        incidence: TaskIncidence,
        disconnected: &[usize],
    ) -> Result<Self> {
        Self::validate_layout(steps, seg_len)?;
        let mut connected = vec![true; steps - 1];
        for &t in disconnected {
            if t == 0 || t >= steps {
                return Err(Error::InvalidGraph(format!(
                    "disconnected boundary {t} outside 1..{}",
                    steps - 1
                )));
            }
            connected[t - 1] = false;
        }
        Self::build(steps, seg_len, n_tasks, incidence, connected)
    }

    fn validate_layout(steps: usize, seg_len: usize) -> Result<()> {
        if seg_len < 2 {
            return Err(Error::InvalidGraph(format!("segment length L must be >= 2, got {seg_len}")));
        }
        if steps == 0 || !steps.is_multiple_of(seg_len) {
            return Err(Error::InvalidGraph(format!(
                "T = {steps} is not a positive multiple of L = {seg_len}"
            )));
        }
        Ok(())
    }

    fn assemble(steps: usize, seg_len: usize, incidence: TaskIncidence, connected: Vec<bool>) -> Self {
        let n_tasks = incidence.n_tasks();
        let n = 2 * steps + n_tasks;
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        let mut add = |from: usize, to: usize| {
            parents[to].push(from);
            children[from].push(to);
        };
        let s = |t: usize| 2 * (t - 1);
        let a = |t: usize| 2 * (t - 1) + 1;
        for t in 1..=steps {
            add(s(t), a(t));
            if t < steps && connected[t - 1] {
                add(s(t), s(t + 1));
                add(a(t), s(t + 1));
            }
            let k = (t - 1) / seg_len + 1;
            for i in 1..=n_tasks {
                if incidence.get(k, i) {
                    add(a(t), 2 * steps + i - 1);
                }
            }
        }
        for list in parents.iter_mut().chain(children.iter_mut()) {
            list.sort_unstable();
        }
        TemporalGraph {
            steps,
            seg_len,
            n_tasks,
            connected,
            incidence,
            parents,
            children,
        }
    }

    /// Copy of this graph with `extra` candidate tasks that no action feeds.
    /// Such graphs deliberately violate the two-segment rule and exist to
    /// exercise discovery over a pool of candidate tasks.
    pub fn with_extra_candidates(&self, extra: usize) -> Self {
        Self::assemble(
            self.steps,
            self.seg_len,
            self.incidence.with_extra_columns(extra),
            self.connected.clone(),
        )
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn seg_len(&self) -> usize {
        self.seg_len
    }

    pub fn n_segments(&self) -> usize {
        self.steps / self.seg_len
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn incidence(&self) -> &TaskIncidence {
        &self.incidence
    }

    pub fn connected_boundaries(&self) -> &[bool] {
        &self.connected
    }

    /// Boundaries `t` with `t -> t+1` cut.
    pub fn disconnected_boundaries(&self) -> Vec<usize> {
        (1..self.steps).filter(|&t| !self.connected[t - 1]).collect()
    }

    pub fn is_connected(&self, t: usize) -> bool {
        t >= 1 && t < self.steps && self.connected[t - 1]
    }

    pub fn segment_of(&self, t: usize) -> usize {
        (t - 1) / self.seg_len + 1
    }

    pub fn segment_steps(&self, k: usize) -> std::ops::RangeInclusive<usize> {
        (k - 1) * self.seg_len + 1..=k * self.seg_len
    }

    pub fn node_count(&self) -> usize {
        2 * self.steps + self.n_tasks
    }

    /// All nodes in canonical order.
    pub fn nodes(&self) -> Vec<NodeId> {
        (0..self.node_count()).map(|ix| self.node_at(ix)).collect()
    }

    pub fn contains(&self, node: &NodeId) -> bool {
        match node.kind {
            NodeKind::State | NodeKind::Action => node.index >= 1 && node.index <= self.steps,
            NodeKind::Task => node.index >= 1 && node.index <= self.n_tasks,
        }
    }

    pub(crate) fn index_of(&self, node: &NodeId) -> Result<usize> {
        if !self.contains(node) {
            return Err(Error::UnknownNode(*node));
        }
        Ok(match node.kind {
            NodeKind::State => 2 * (node.index - 1),
            NodeKind::Action => 2 * (node.index - 1) + 1,
            NodeKind::Task => 2 * self.steps + node.index - 1,
        })
    }

    pub(crate) fn node_at(&self, ix: usize) -> NodeId {
        if ix >= 2 * self.steps {
            NodeId::task(ix - 2 * self.steps + 1)
        } else if ix.is_multiple_of(2) {
            NodeId::state(ix / 2 + 1)
        } else {
            NodeId::action(ix / 2 + 1)
        }
    }

    pub(crate) fn parent_ix(&self, ix: usize) -> &[usize] {
        &self.parents[ix]
    }

    pub(crate) fn child_ix(&self, ix: usize) -> &[usize] {
        &self.children[ix]
    }

    pub fn parents_of(&self, node: &NodeId) -> Result<Vec<NodeId>> {
        let ix = self.index_of(node)?;
        Ok(self.parents[ix].iter().map(|&p| self.node_at(p)).collect())
    }

    pub fn children_of(&self, node: &NodeId) -> Result<Vec<NodeId>> {
        let ix = self.index_of(node)?;
        Ok(self.children[ix].iter().map(|&c| self.node_at(c)).collect())
    }

    pub fn has_edge(&self, from: &NodeId, to: &NodeId) -> bool {
        match (self.index_of(from), self.index_of(to)) {
            (Ok(f), Ok(t)) => self.children[f].binary_search(&t).is_ok(),
            _ => false,
        }
    }

    /// All edges `(from, to)` in canonical order of `from`, then `to`.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut out = Vec::new();
        for (f, kids) in self.children.iter().enumerate() {
            for &c in kids {
                out.push((self.node_at(f), self.node_at(c)));
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.children.iter().map(Vec::len).sum()
    }

    /// Kahn's algorithm; the construction never creates cycles, this is a
    /// consistency check.
    pub fn is_acyclic(&self) -> bool {
        let n = self.node_count();
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut queue: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(u) = queue.pop() {
            seen += 1;
            for &c in &self.children[u] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push(c);
                }
            }
        }
        seen == n
    }

    /// Ground-truth tasks relevant to segment `k`.
    pub fn relevant_tasks(&self, k: usize) -> Result<BTreeSet<usize>> {
        if k == 0 || k > self.n_segments() {
            return Err(Error::InvalidArgument(format!(
                "segment {k} outside 1..={}",
                self.n_segments()
            )));
        }
        Ok(self.incidence.tasks_of(k))
    }

    /// Band set of this graph for `(k, v, i)`.
    pub fn band_set(&self, k: usize, v: usize, i: usize) -> Result<ConditioningSet> {
        if i > self.n_tasks || v > self.n_segments() {
            return Err(Error::InvalidArgument(format!(
                "band set (k={k}, v={v}, i={i}) out of range for N={}, M={}",
                self.n_segments(),
                self.n_tasks
            )));
        }
        band_set(k, v, i, self.seg_len, self.steps)
    }
}

/// Ten steps, L = 2, one task relevant to segments 2 and 4, boundary
/// `1 -> 2` cut and every other boundary connected.
pub fn demo_graph() -> TemporalGraph {
    let inc = TaskIncidence::from_pairs(5, 1, &[(2, 1), (4, 1)]).expect("static incidence");
    TemporalGraph::from_disconnected(10, 2, 1, inc, &[1]).expect("static graph")
}

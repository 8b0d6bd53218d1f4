//! Machine checks of the band-set results on a single graph. Each check
//! returns its counterexamples; an empty list means the claim held.

use serde::Serialize;

use crate::error::Result;
use crate::graph::{band_set, local_band_set, classify_band_path, NodeId, PathShape, TemporalGraph};

/// A band query whose d-connection verdict disagrees with the incidence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BandMismatch {
    pub k: usize,
    pub v: usize,
    pub i: usize,
    pub connected: bool,
    pub expected: bool,
}

/// For every `k < v` and task `i`: `s[kL]` and `s[vL]` are d-connected given
/// the band set iff task `i` is relevant to both segments.
pub fn band_equivalence(g: &TemporalGraph) -> Result<Vec<BandMismatch>> {
    let (l, n) = (g.seg_len(), g.n_segments());
    let mut out = Vec::new();
    for i in 1..=g.n_tasks() {
        for k in 1..=n {
            for v in k + 1..=n {
                let z = g.band_set(k, v, i)?;
                let connected = !g.d_separated(&NodeId::state(k * l), &NodeId::state(v * l), &z)?;
                let expected = g.incidence().get(k, i) && g.incidence().get(v, i);
                if connected != expected {
                    out.push(BandMismatch { k, v, i, connected, expected });
                }
            }
        }
    }
    Ok(out)
}

/// Which representative pairs the invariance check covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepScope {
    /// Every `j` in segment `k` and every `q` in segment `v`.
    All,
    /// Only in-segment offsets `>= 2`, which excludes segment-initial steps
    /// and adjacent pairs.
    Interior,
}

/// A representative pair whose local band verdict differs from the
/// boundary query of the same `(k, v, i)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RepMismatch {
    pub k: usize,
    pub v: usize,
    pub i: usize,
    pub j: usize,
    pub q: usize,
    pub boundary_connected: bool,
    pub local_connected: bool,
}

/// Compares `s[j]` vs `s[q]` given the local band set with the boundary
/// query for every representative pair in `scope`.
pub fn representative_invariance(g: &TemporalGraph, scope: RepScope) -> Result<Vec<RepMismatch>> {
    let (l, n, steps) = (g.seg_len(), g.n_segments(), g.steps());
    let first = match scope {
        RepScope::All => 1,
        RepScope::Interior => 2,
    };
    let mut out = Vec::new();
    for i in 1..=g.n_tasks() {
        for k in 1..=n {
            for v in k + 1..=n {
                let z = band_set(k, v, i, l, steps)?;
                let boundary = !g.d_separated(&NodeId::state(k * l), &NodeId::state(v * l), &z)?;
                for oj in first..=l {
                    for oq in first..=l {
                        let (j, q) = ((k - 1) * l + oj, (v - 1) * l + oq);
                        let zl = local_band_set(j, q, i, steps)?;
                        let local = !g.d_separated(&NodeId::state(j), &NodeId::state(q), &zl)?;
                        if local != boundary {
                            out.push(RepMismatch {
                                k,
                                v,
                                i,
                                j,
                                q,
                                boundary_connected: boundary,
                                local_connected: local,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Tallies of the path enumeration under band sets, with the offending
/// paths rendered as text.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PathFormReport {
    pub queries: usize,
    pub paths: usize,
    /// Paths in one of the four canonical forms.
    pub canonical: usize,
    /// Paths that detour through a conditioned collider state next to a
    /// representative.
    pub detours: usize,
    /// Paths whose task nodes are not exactly `[g_i]`, or that fit no shape.
    pub malformed: Vec<String>,
    /// Queries where "some path exists" disagrees with d-separation.
    pub dsep_disagreements: Vec<String>,
}

impl PathFormReport {
    /// Every path is in one of the four canonical forms.
    pub fn all_canonical(&self) -> bool {
        self.malformed.is_empty() && self.dsep_disagreements.is_empty() && self.canonical == self.paths
    }

    /// Every path runs through `g_i` alone and has a recognized shape,
    /// detours included.
    pub fn all_classified(&self) -> bool {
        self.malformed.is_empty() && self.dsep_disagreements.is_empty()
    }
}

/// Enumerates every d-connecting path of length `<= max_len` between
/// `s[kL]` and `s[vL]` given the band set, for all `k < v` and tasks `i`.
pub fn path_forms(g: &TemporalGraph, max_len: usize) -> Result<PathFormReport> {
    let (l, n) = (g.seg_len(), g.n_segments());
    let mut report = PathFormReport::default();
    for i in 1..=g.n_tasks() {
        for k in 1..=n {
            for v in k + 1..=n {
                let (j, q) = (k * l, v * l);
                let z = g.band_set(k, v, i)?;
                let (x, y) = (NodeId::state(j), NodeId::state(q));
                let paths = g.enumerate_connecting_paths(&x, &y, &z, max_len)?;
                report.queries += 1;
                report.paths += paths.len();
                let connected = !g.d_separated(&x, &y, &z)?;
                if connected == paths.is_empty() {
                    report
                        .dsep_disagreements
                        .push(format!("k={k} v={v} i={i}: d-connected={connected}, paths={}", paths.len()));
                }
                for p in &paths {
                    let shape = (p.task_nodes() == [NodeId::task(i)])
                        .then(|| classify_band_path(p, j, q, i))
                        .flatten();
                    match shape.as_ref().map(PathShape::canonical_form) {
                        Some(Some(_)) => report.canonical += 1,
                        Some(None) => report.detours += 1,
                        None => report.malformed.push(p.to_string()),
                    }
                }
            }
        }
    }
    Ok(report)
}

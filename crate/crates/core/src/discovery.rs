//! Segment-task structure discovery by band-set CI queries, the
//! representative-state variant, and the exact-recovery verifier.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ci::{ci_query, Backend, CiContext, CiQuery, CiResult};
use crate::error::{Error, Result};
use crate::graph::{band_set, local_band_set, ConditioningSet, NodeId, TaskIncidence, TemporalGraph};

/// How the representative steps `j` in segment `k` and `q` in segment `v`
/// are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepRule {
    /// `j = kL`, `q = vL`.
    RightBoundary,
    /// Offset `(L + 1) / 2` inside each segment.
    Middle,
    /// Fixed 1-based offset inside each segment.
    Offset(usize),
    /// Uniform offset per `(k, v)` pair, reproducible from the seed.
    Random { seed: u64 },
}

impl RepRule {
    /// Representatives `(j, q)` for the segment pair `(k, v)`.
    pub fn pick(&self, k: usize, v: usize, seg_len: usize) -> (usize, usize) {
        let (ok, ov) = match *self {
            RepRule::RightBoundary => (seg_len, seg_len),
            RepRule::Middle => (seg_len.div_ceil(2), seg_len.div_ceil(2)),
            RepRule::Offset(o) => (o, o),
            RepRule::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((k as u64) << 32) | v as u64);
                (rng.random_range(1..=seg_len), rng.random_range(1..=seg_len))
            }
        };
        ((k - 1) * seg_len + ok, (v - 1) * seg_len + ov)
    }

    fn validate(&self, seg_len: usize) -> Result<()> {
        if let RepRule::Offset(o) = *self {
            if o == 0 || o > seg_len {
                return Err(Error::InvalidArgument(format!("offset {o} outside 1..={seg_len}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryOptions {
    pub backend: Backend,
    pub alpha: f64,
    /// Divide `alpha` by the number of queries.
    pub bonferroni: bool,
}

impl DiscoveryOptions {
    pub fn new(backend: Backend) -> Self {
        DiscoveryOptions {
            backend,
            alpha: 0.05,
            bonferroni: false,
        }
    }
}

/// One band query of the discovery loop.
#[derive(Clone, Debug, PartialEq)]
pub struct BandQuery {
    pub k: usize,
    pub v: usize,
    pub i: usize,
    pub x: NodeId,
    pub y: NodeId,
    pub z: ConditioningSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub k: usize,
    pub v: usize,
    pub i: usize,
    /// Representative steps actually tested.
    pub j: usize,
    pub q: usize,
    pub result: CiResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryResult {
    pub incidence_est: TaskIncidence,
    /// `step_labels[t - 1]` is the task set of step `t`.
    pub step_labels: Vec<BTreeSet<usize>>,
    pub log: Vec<QueryRecord>,
}

fn check_layout(steps: usize, seg_len: usize) -> Result<usize> {
    if seg_len < 2 || steps == 0 || !steps.is_multiple_of(seg_len) {
        return Err(Error::InvalidArgument(format!(
            "T = {steps} must be a positive multiple of L = {seg_len} >= 2"
        )));
    }
    Ok(steps / seg_len)
}

/// Queries in `(i, k, v)` lexicographic order.
fn band_queries(
    steps: usize,
    seg_len: usize,
    n_tasks: usize,
    reps: Option<RepRule>,
) -> Result<Vec<BandQuery>> {
    let n_seg = check_layout(steps, seg_len)?;
    let mut out = Vec::with_capacity(n_tasks * n_seg * n_seg.saturating_sub(1) / 2);
    for i in 1..=n_tasks {
        for k in 1..=n_seg {
            for v in k + 1..=n_seg {
                let (x, y, z) = match reps {
                    None => (k * seg_len, v * seg_len, band_set(k, v, i, seg_len, steps)?),
                    Some(rule) => {
                        let (j, q) = rule.pick(k, v, seg_len);
                        (j, q, local_band_set(j, q, i, steps)?)
                    }
                };
                out.push(BandQuery {
                    k,
                    v,
                    i,
                    x: NodeId::state(x),
                    y: NodeId::state(y),
                    z,
                });
            }
        }
    }
    Ok(out)
}

/// Runs every band query through `tester` (concurrently), then builds the
/// incidence estimate, the step labels and the log in canonical order.
pub fn discover_with<F>(
    steps: usize,
    seg_len: usize,
    n_tasks: usize,
    reps: Option<RepRule>,
    tester: F,
) -> Result<DiscoveryResult>
where
    F: Fn(&BandQuery) -> Result<CiResult> + Sync,
{
    let n_seg = check_layout(steps, seg_len)?;
    let queries = band_queries(steps, seg_len, n_tasks, reps)?;
    let results: Vec<CiResult> = queries
        .par_iter()
        .map(|bq| {
            tester(bq).map_err(|e| Error::Query {
                k: bq.k,
                v: bq.v,
                i: bq.i,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let mut inc = TaskIncidence::zeros(n_seg, n_tasks);
    let mut log = Vec::with_capacity(queries.len());
    for (bq, result) in queries.into_iter().zip(results) {
        if result.dependent {
            inc.set(bq.k, bq.i, true);
            inc.set(bq.v, bq.i, true);
        }
        log.push(QueryRecord {
            k: bq.k,
            v: bq.v,
            i: bq.i,
            j: bq.x.index,
            q: bq.y.index,
            result,
        });
    }
    let step_labels = (1..=steps).map(|t| inc.tasks_of((t - 1) / seg_len + 1)).collect();
    Ok(DiscoveryResult {
        incidence_est: inc,
        step_labels,
        log,
    })
}

fn query_count(steps: usize, seg_len: usize, n_tasks: usize) -> usize {
    let n = steps / seg_len;
    n_tasks * n * n.saturating_sub(1) / 2
}

fn ctx_tester<'a>(
    ctx: &'a CiContext,
    opts: &DiscoveryOptions,
    total: usize,
) -> impl Fn(&BandQuery) -> Result<CiResult> + Sync + 'a {
    let alpha = if opts.bonferroni && total > 0 {
        opts.alpha / total as f64
    } else {
        opts.alpha
    };
    let backend = opts.backend;
    move |bq: &BandQuery| ci_query(&CiQuery::new(bq.x, bq.y, bq.z.clone(), backend, alpha), ctx)
}

/// Tests `s[kL]` against `s[vL]` given the band set for every task `i` and
/// segment pair `k < v`, marking `i` on both segments when dependent.
pub fn discover_structure(
    ctx: &CiContext,
    steps: usize,
    seg_len: usize,
    n_tasks: usize,
    opts: &DiscoveryOptions,
) -> Result<DiscoveryResult> {
    check_layout(steps, seg_len)?;
    let tester = ctx_tester(ctx, opts, query_count(steps, seg_len, n_tasks));
    discover_with(steps, seg_len, n_tasks, None, tester)
}

/// Same loop with representatives chosen by `rule` and the local band set
/// around them. Needs `L > 2`.
pub fn discover_with_representatives(
    ctx: &CiContext,
    steps: usize,
    seg_len: usize,
    n_tasks: usize,
    opts: &DiscoveryOptions,
    rule: RepRule,
) -> Result<DiscoveryResult> {
    if seg_len <= 2 {
        return Err(Error::InvalidArgument(format!(
            "representative discovery needs L > 2, got L = {seg_len}"
        )));
    }
    rule.validate(seg_len)?;
    check_layout(steps, seg_len)?;
    let tester = ctx_tester(ctx, opts, query_count(steps, seg_len, n_tasks));
    discover_with(steps, seg_len, n_tasks, Some(rule), tester)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub exact: bool,
    /// Mismatched `(segment, task)` cells, 1-based.
    pub mismatches: Vec<(usize, usize)>,
}

/// Cells where `est` and `truth` disagree.
pub fn mismatched_cells(est: &TaskIncidence, truth: &TaskIncidence) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for k in 1..=truth.n_segments() {
        for i in 1..=truth.n_tasks() {
            if est.get(k, i) != truth.get(k, i) {
                out.push((k, i));
            }
        }
    }
    out
}

/// Runs oracle discovery on `g` and compares with its incidence.
pub fn verify_exact_recovery(g: &TemporalGraph) -> Result<RecoveryReport> {
    let ctx = CiContext::new().with_graph(g.clone());
    let opts = DiscoveryOptions::new(Backend::GraphOracle);
    verify_exact_recovery_with(g, ctx_tester(&ctx, &opts, 0))
}

/// Like [`verify_exact_recovery`] with a caller-supplied tester, so that the
/// harness itself can be checked against corrupted answers.
pub fn verify_exact_recovery_with<F>(g: &TemporalGraph, tester: F) -> Result<RecoveryReport>
where
    F: Fn(&BandQuery) -> Result<CiResult> + Sync,
{
    let res = discover_with(g.steps(), g.seg_len(), g.n_tasks(), None, tester)?;
    let mismatches = mismatched_cells(&res.incidence_est, g.incidence());
    Ok(RecoveryReport {
        exact: mismatches.is_empty(),
        mismatches,
    })
}

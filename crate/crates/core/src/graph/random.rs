//! Random valid temporal graphs.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{TaskIncidence, TemporalGraph};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomGraphConfig {
    pub steps: usize,
    pub seg_len: usize,
    pub n_tasks: usize,
    /// Fraction of the `N - 1` segment boundaries to cut.
    pub disconnect_frac: f64,
    /// Bernoulli probability of each incidence cell before the top-up that
    /// makes every task relevant to at least two segments.
    pub relevance_prob: f64,
}

impl RandomGraphConfig {
    pub fn new(steps: usize, seg_len: usize, n_tasks: usize) -> Self {
        RandomGraphConfig {
            steps,
            seg_len,
            n_tasks,
            disconnect_frac: 0.2,
            relevance_prob: 0.5,
        }
    }
}

/// Draws a valid graph: `round(disconnect_frac * (N-1))` segment boundaries
/// `t = kL` are cut uniformly at random, boundaries inside a segment stay
/// connected, and each task column gets Bernoulli cells topped up to two.
pub fn random_graph<R: Rng + ?Sized>(cfg: &RandomGraphConfig, rng: &mut R) -> Result<TemporalGraph> {
    if cfg.seg_len < 2 {
        return Err(Error::InvalidGraph(format!(
            "segment length L must be >= 2, got {}",
            cfg.seg_len
        )));
    }
    if cfg.steps == 0 || !cfg.steps.is_multiple_of(cfg.seg_len) {
        return Err(Error::InvalidGraph(format!(
            "T = {} is not a positive multiple of L = {}",
            cfg.steps, cfg.seg_len
        )));
    }
    let n_seg = cfg.steps / cfg.seg_len;
    if n_seg < 2 {
        return Err(Error::InvalidGraph(format!("need at least two segments, got {n_seg}")));
    }
    if !(0.0..=1.0).contains(&cfg.disconnect_frac) || !(0.0..=1.0).contains(&cfg.relevance_prob) {
        return Err(Error::InvalidArgument(
            "disconnect_frac and relevance_prob must lie in [0, 1]".into(),
        ));
    }

    let mut inc = TaskIncidence::zeros(n_seg, cfg.n_tasks);
    for i in 1..=cfg.n_tasks {
        for k in 1..=n_seg {
            if rng.random_bool(cfg.relevance_prob) {
                inc.set(k, i, true);
            }
        }
        while inc.column_count(i) < 2 {
            let k = rng.random_range(1..=n_seg);
            inc.set(k, i, true);
        }
    }

    let n_cut = (cfg.disconnect_frac * (n_seg - 1) as f64).round() as usize;
    let mut cut: Vec<usize> = sample(rng, n_seg - 1, n_cut)
        .into_iter()
        .map(|b| (b + 1) * cfg.seg_len)
        .collect();
    cut.sort_unstable();
    TemporalGraph::from_disconnected(cfg.steps, cfg.seg_len, cfg.n_tasks, inc, &cut)
}

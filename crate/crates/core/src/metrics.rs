//! Incidence-recovery scores and the discovery sweep.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ci::{Backend, CiContext, CovarianceSource};
use crate::discovery::{discover_structure, DiscoveryOptions};
use crate::error::{Error, Result};
use crate::graph::{random_graph, RandomGraphConfig, TaskIncidence, TemporalGraph};
use crate::scm::{parameterize, ScmConfig, ScmParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// Matthews correlation; 0 whenever a marginal count is zero.
    pub fn mcc(&self) -> f64 {
        let (tp, tn, fp, fn_) = (self.tp as f64, self.tn as f64, self.fp as f64, self.fn_ as f64);
        let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
        if factors.contains(&0.0) {
            return 0.0;
        }
        let denom = factors.iter().product::<f64>().sqrt();
        ((tp * tn - fp * fn_) / denom).clamp(-1.0, 1.0)
    }
}

pub fn confusion(est: &TaskIncidence, truth: &TaskIncidence) -> Result<Confusion> {
    if est.n_segments() != truth.n_segments() || est.n_tasks() != truth.n_tasks() {
        return Err(Error::InvalidArgument(format!(
            "incidence shapes differ: {}x{} vs {}x{}",
            est.n_segments(),
            est.n_tasks(),
            truth.n_segments(),
            truth.n_tasks()
        )));
    }
    let mut c = Confusion::default();
    for (re, rt) in est.rows().iter().zip(truth.rows()) {
        for (&e, &t) in re.iter().zip(rt) {
            match (e, t) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
    }
    Ok(c)
}

/// Fraction of matching cells.
pub fn incidence_accuracy(est: &TaskIncidence, truth: &TaskIncidence) -> Result<f64> {
    Ok(confusion(est, truth)?.accuracy())
}

pub fn incidence_mcc(est: &TaskIncidence, truth: &TaskIncidence) -> Result<f64> {
    Ok(confusion(est, truth)?.mcc())
}

/// Task count used when sweeping over `T`.
pub fn tasks_for_steps(steps: usize) -> usize {
    ((steps as f64 / 5.0).round() as usize).max(2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub backend: Backend,
    /// `(T, M)` cells.
    pub grid: Vec<(usize, usize)>,
    pub seg_len: usize,
    pub seeds: Vec<u64>,
    pub n: usize,
    pub alpha: f64,
    pub bonferroni: bool,
    pub disconnect_frac: f64,
    pub scm: ScmConfig,
}

/// Empty grid, Fisher z, ten seeds.
impl Default for SweepConfig {
    fn default() -> Self {
        Self::with_grid(Backend::FisherZ, Vec::new(), (0..10).collect())
    }
}

impl SweepConfig {
    /// `T` in `steps` with `M = max(2, round(T/5))`.
    pub fn over_steps(backend: Backend, steps: &[usize], seeds: Vec<u64>) -> Self {
        let grid = steps.iter().map(|&t| (t, tasks_for_steps(t))).collect();
        Self::with_grid(backend, grid, seeds)
    }

    /// `M` in `tasks` at fixed `T`.
    pub fn over_tasks(backend: Backend, steps: usize, tasks: &[usize], seeds: Vec<u64>) -> Self {
        let grid = tasks.iter().map(|&m| (steps, m)).collect();
        Self::with_grid(backend, grid, seeds)
    }

    pub fn with_grid(backend: Backend, grid: Vec<(usize, usize)>, seeds: Vec<u64>) -> Self {
        SweepConfig {
            backend,
            grid,
            seg_len: 2,
            seeds,
            n: 10_000,
            alpha: 0.05,
            bonferroni: false,
            disconnect_frac: 0.2,
            scm: ScmConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub method: String,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "L")]
    pub seg_len: usize,
    #[serde(rename = "M")]
    pub n_tasks: usize,
    pub seed: u64,
    pub n: usize,
    pub accuracy: f64,
    pub mcc: f64,
    pub runtime_s: f64,
}

/// Graph, parameter and sample seeds of one sweep cell. The cell
/// coordinates select the ChaCha stream so cells never share randomness.
fn cell_rng(steps: usize, n_tasks: usize, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((steps as u64) << 32) | n_tasks as u64);
    rng
}

/// The graph a sweep cell uses, reproducible from the cell coordinates.
pub fn sweep_graph(cfg: &SweepConfig, steps: usize, n_tasks: usize, seed: u64) -> Result<TemporalGraph> {
    let mut rng = cell_rng(steps, n_tasks, seed);
    let gcfg = RandomGraphConfig {
        disconnect_frac: cfg.disconnect_frac,
        ..RandomGraphConfig::new(steps, cfg.seg_len, n_tasks)
    };
    random_graph(&gcfg, &mut rng)
}

const PD_RETRIES: u64 = 10;

/// Redraws parameters (seed, seed + 1, ...) until the joint covariance is
/// numerically positive definite.
fn parameterize_pd(graph: &TemporalGraph, scm: &ScmConfig, seed: u64) -> Result<(ScmParams, DMatrix<f64>)> {
    for attempt in 0..PD_RETRIES {
        let p = parameterize(graph, scm, seed.wrapping_add(attempt))?;
        match p.joint_covariance() {
            Ok(sigma) => return Ok((p, sigma)),
            Err(Error::NotPositiveDefinite) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::NotPositiveDefinite)
}

fn run_cell(cfg: &SweepConfig, steps: usize, n_tasks: usize, seed: u64) -> Result<SweepRecord> {
    let start = Instant::now();
    let mut rng = cell_rng(steps, n_tasks, seed);
    let gcfg = RandomGraphConfig {
        disconnect_frac: cfg.disconnect_frac,
        ..RandomGraphConfig::new(steps, cfg.seg_len, n_tasks)
    };
    let graph = random_graph(&gcfg, &mut rng)?;
    let params_seed = rng.next_u64();
    let sample_seed = rng.next_u64();

    let ctx = CiContext::new().with_graph(graph.clone());
    let (ctx, n) = match cfg.backend {
        Backend::GraphOracle => (ctx, 0),
        Backend::AnalyticCorr => {
            let (p, sigma) = parameterize_pd(&graph, &cfg.scm, params_seed)?;
            let src = CovarianceSource::new(p.layout().clone(), sigma)?;
            (ctx.with_covariance(src), 0)
        }
        Backend::FisherZ => {
            let (p, _) = parameterize_pd(&graph, &cfg.scm, params_seed)?;
            let data = p.sample(cfg.n, sample_seed)?;
            (ctx.with_dataset(&data), cfg.n)
        }
    };
    let opts = DiscoveryOptions {
        backend: cfg.backend,
        alpha: cfg.alpha,
        bonferroni: cfg.bonferroni,
    };
    let res = discover_structure(&ctx, steps, cfg.seg_len, n_tasks, &opts)?;
    let c = confusion(&res.incidence_est, graph.incidence())?;
    Ok(SweepRecord {
        method: cfg.backend.tag().to_string(),
        steps,
        seg_len: cfg.seg_len,
        n_tasks,
        seed,
        n,
        accuracy: c.accuracy(),
        mcc: c.mcc(),
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// One record per `(T, M)` cell and seed, in grid order then seed order.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRecord>> {
    let cells: Vec<(usize, usize, u64)> = cfg
        .grid
        .iter()
        .flat_map(|&(t, m)| cfg.seeds.iter().map(move |&s| (t, m, s)))
        .collect();
    cells
        .par_iter()
        .map(|&(t, m, s)| run_cell(cfg, t, m, s))
        .collect()
}

/// Mean accuracy and MCC of records matching `steps`.
pub fn mean_scores(records: &[SweepRecord], steps: usize) -> Option<(f64, f64)> {
    let sel: Vec<&SweepRecord> = records.iter().filter(|r| r.steps == steps).collect();
    if sel.is_empty() {
        return None;
    }
    let n = sel.len() as f64;
    Some((
        sel.iter().map(|r| r.accuracy).sum::<f64>() / n,
        sel.iter().map(|r| r.mcc).sum::<f64>() / n,
    ))
}

//! Desk-scale identifiability experiments for task-relevant latents.
//!
//! A task map `u_i(s) = sum_{j in I_i} C[i][j] * sigma(s_j)` is observed
//! through a linear mixing `x = A s`. The learner sees the Jacobian of `u`
//! with respect to `x`, `G(s) = J_u(s) A^-1`, and looks for a decoder
//! `x = Q s_hat` that makes `G Q` as sparse as possible. The composite
//! `s = T s_hat` with `T = A^-1 Q` and the latent map `s_hat = W s` with
//! `W = Q^-1 A` are what the checks inspect.

use std::collections::BTreeSet;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scm::random_well_conditioned;

/// Threshold for the off-block test after rows are scaled to unit max.
pub const OFF_BLOCK_TOL: f64 = 1e-4;
/// Relative threshold below which a Jacobian entry counts as zero.
pub const ZERO_TOL: f64 = 1e-6;
const DET_FLOOR: f64 = 1e-12;
const MIN_UNIT_DET: f64 = 1e-6;
const MAX_EXHAUSTIVE_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Tanh,
    /// Constant derivative; the span condition fails for `|I_i| >= 2`.
    Identity,
}

impl Nonlinearity {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Identity => x,
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => 1.0 - x.tanh().powi(2),
            Nonlinearity::Identity => 1.0,
        }
    }
}

fn ser_rows<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdentInstance {
    pub d_s: usize,
    /// 1-based support `I_i` of each task row.
    pub supports: Vec<BTreeSet<usize>>,
    #[serde(serialize_with = "ser_rows")]
    pub coeffs: DMatrix<f64>,
    pub nonlinearity: Nonlinearity,
    #[serde(serialize_with = "ser_rows")]
    pub mixing: DMatrix<f64>,
    pub seed: u64,
}

/// Random instance with tanh task maps, coefficients in `+-[0.5, 1.5]` on
/// the supports and a well-conditioned Gaussian mixing.
pub fn make_instance(d_s: usize, supports: &[BTreeSet<usize>], seed: u64) -> Result<IdentInstance> {
    if supports.is_empty() {
        return Err(Error::InvalidArgument("need at least one task support".into()));
    }
    for (i, sup) in supports.iter().enumerate() {
        if sup.is_empty() {
            return Err(Error::InvalidArgument(format!("support of task {} is empty", i + 1)));
        }
        if let Some(&bad) = sup.iter().find(|&&j| j == 0 || j > d_s) {
            return Err(Error::InvalidArgument(format!(
                "support of task {} has index {bad} outside 1..={d_s}",
                i + 1
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_g = supports.len();
    let mut coeffs = DMatrix::zeros(d_g, d_s);
    for (i, sup) in supports.iter().enumerate() {
        for &j in sup {
            let mag: f64 = rng.random_range(0.5..=1.5);
            coeffs[(i, j - 1)] = if rng.random_bool(0.5) { mag } else { -mag };
        }
    }
    let mixing = random_well_conditioned(d_s, &mut rng)?;
    Ok(IdentInstance {
        d_s,
        supports: supports.to_vec(),
        coeffs,
        nonlinearity: Nonlinearity::Tanh,
        mixing,
        seed,
    })
}

impl IdentInstance {
    pub fn d_g(&self) -> usize {
        self.supports.len()
    }

    pub fn with_nonlinearity(mut self, nl: Nonlinearity) -> Self {
        self.nonlinearity = nl;
        self
    }

    pub fn with_mixing(mut self, mixing: DMatrix<f64>) -> Result<Self> {
        if mixing.nrows() != self.d_s || mixing.ncols() != self.d_s {
            return Err(Error::InvalidArgument("mixing must be d_s x d_s".into()));
        }
        if mixing.clone().try_inverse().is_none() {
            return Err(Error::Singular("mixing matrix".into()));
        }
        self.mixing = mixing;
        Ok(self)
    }

    /// Latents that no task depends on, 1-based.
    pub fn irrelevant_latents(&self) -> BTreeSet<usize> {
        let used: BTreeSet<usize> = self.supports.iter().flatten().copied().collect();
        (1..=self.d_s).filter(|j| !used.contains(j)).collect()
    }

    pub fn task_map(&self, s: &[f64]) -> Vec<f64> {
        (0..self.d_g())
            .map(|i| (0..self.d_s).map(|j| self.coeffs[(i, j)] * self.nonlinearity.eval(s[j])).sum())
            .collect()
    }

    /// `J_u(s)[i][j] = C[i][j] * sigma'(s_j)`.
    pub fn task_jacobian(&self, s: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.d_g(), self.d_s, |i, j| {
            self.coeffs[(i, j)] * self.nonlinearity.derivative(s[j])
        })
    }

    /// `n x d_s` independent standard-normal latents.
    pub fn sample_latents(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, self.d_s, |_, _| rng.sample(StandardNormal))
    }

    fn mixing_inverse(&self) -> Result<DMatrix<f64>> {
        self.mixing.clone().try_inverse().ok_or_else(|| Error::Singular("mixing matrix".into()))
    }

    /// Stacked observation-space Jacobians `G(s_l) = J_u(s_l) A^-1`,
    /// `(n * d_g) x d_s`, point-major.
    pub fn generalist_jacobians(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let a_inv = self.mixing_inverse()?;
        Ok(stack_jacobians(self, points, Some(&a_inv)))
    }
}

fn stack_jacobians(inst: &IdentInstance, points: &DMatrix<f64>, right: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    let d_g = inst.d_g();
    let width = right.map_or(inst.d_s, |r| r.ncols());
    let mut out = DMatrix::zeros(points.nrows() * d_g, width);
    for (l, row) in points.row_iter().enumerate() {
        let s: Vec<f64> = row.iter().copied().collect();
        let j = inst.task_jacobian(&s);
        let block = match right {
            Some(r) => j * r,
            None => j,
        };
        out.view_mut((l * d_g, 0), (d_g, width)).copy_from(&block);
    }
    out
}

/// Instance spec document. Supports are 1-based; the mixing, when given,
/// replaces the random one row by row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub d_s: usize,
    pub supports: Vec<Vec<usize>>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonlinearity: Option<Nonlinearity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing: Option<Vec<Vec<f64>>>,
}

impl InstanceSpec {
    pub fn build(&self) -> Result<IdentInstance> {
        let supports: Vec<BTreeSet<usize>> = self.supports.iter().map(|s| s.iter().copied().collect()).collect();
        let mut inst = make_instance(self.d_s, &supports, self.seed)?;
        if let Some(nl) = self.nonlinearity {
            inst = inst.with_nonlinearity(nl);
        }
        if let Some(rows) = &self.mixing {
            if rows.len() != self.d_s || rows.iter().any(|r| r.len() != self.d_s) {
                return Err(Error::InvalidArgument("mixing must be d_s x d_s".into()));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            inst = inst.with_mixing(DMatrix::from_row_slice(self.d_s, self.d_s, &flat))?;
        }
        Ok(inst)
    }
}

/// Two singleton tasks on two latents observed through a 45 degree
/// rotation.
pub fn rotation_instance(seed: u64) -> Result<IdentInstance> {
    let c = std::f64::consts::FRAC_1_SQRT_2;
    let supports: Vec<BTreeSet<usize>> = vec![[1].into(), [2].into()];
    make_instance(2, &supports, seed)?.with_mixing(DMatrix::from_row_slice(2, 2, &[c, -c, c, c]))
}

/// Random distinct supports for `d_s` latents: one to three tasks, each on
/// a random subset of at most `d_s - 1` latents, so supports may overlap and
/// some latents may be task-irrelevant.
pub fn random_supports<R: Rng + ?Sized>(d_s: usize, rng: &mut R) -> Vec<BTreeSet<usize>> {
    let n_tasks = rng.random_range(1..=d_s.min(3));
    let max_size = (d_s - 1).max(1);
    let mut out: Vec<BTreeSet<usize>> = Vec::new();
    while out.len() < n_tasks {
        let size = rng.random_range(1..=max_size);
        let sup: BTreeSet<usize> = rand::seq::index::sample(rng, d_s, size).into_iter().map(|j| j + 1).collect();
        if !out.contains(&sup) {
            out.push(sup);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpanRow {
    pub holds: bool,
    /// Sample points whose Jacobian rows are linearly independent.
    pub witnesses: Vec<Vec<f64>>,
}

fn full_row_rank(rows: &[DVector<f64>]) -> bool {
    if rows.is_empty() {
        return true;
    }
    let m = DMatrix::from_fn(rows.len(), rows[0].len(), |r, c| rows[r][c]);
    let sv = m.singular_values();
    let hi = sv.max();
    hi > 0.0 && sv.iter().filter(|&&v| v > 1e-8 * hi).count() == rows.len()
}

/// For each task row, greedily collects `|I_i|` sample points whose
/// Jacobian rows are linearly independent.
pub fn check_span_condition(inst: &IdentInstance, sample_count: usize, seed: u64) -> Result<Vec<SpanRow>> {
    let need = inst.supports.iter().map(BTreeSet::len).max().unwrap_or(0);
    if sample_count < need {
        return Err(Error::InvalidArgument(format!(
            "sample_count {sample_count} is below the largest support size {need}"
        )));
    }
    let points = inst.sample_latents(sample_count, seed);
    let jacs: Vec<DMatrix<f64>> = points
        .row_iter()
        .map(|r| inst.task_jacobian(&r.iter().copied().collect::<Vec<_>>()))
        .collect();
    Ok((0..inst.d_g())
        .map(|i| {
            let target = inst.supports[i].len();
            let mut chosen: Vec<DVector<f64>> = Vec::new();
            let mut witnesses = Vec::new();
            for (l, j) in jacs.iter().enumerate() {
                if chosen.len() == target {
                    break;
                }
                let row = j.row(i).transpose();
                chosen.push(row);
                if full_row_rank(&chosen) {
                    witnesses.push(points.row(l).iter().copied().collect());
                } else {
                    chosen.pop();
                }
            }
            SpanRow {
                holds: chosen.len() == target,
                witnesses,
            }
        })
        .collect())
}

/// Per-row nonzero pattern of a stacked Jacobian: entry `(i, c)` is
/// nonzero when its largest magnitude over points exceeds `zero_tol` times
/// the largest magnitude in row `i`.
fn row_supports(stacked: &DMatrix<f64>, d_g: usize, zero_tol: f64) -> Vec<BTreeSet<usize>> {
    let width = stacked.ncols();
    let mut peak = DMatrix::<f64>::zeros(d_g, width);
    for (r, row) in stacked.row_iter().enumerate() {
        let i = r % d_g;
        for c in 0..width {
            peak[(i, c)] = peak[(i, c)].max(row[c].abs());
        }
    }
    (0..d_g)
        .map(|i| {
            let hi = peak.row(i).max();
            (0..width).filter(|&c| hi > 0.0 && peak[(i, c)] > zero_tol * hi).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SupersetRow {
    pub estimated: usize,
    pub truth: usize,
    pub holds: bool,
}

/// Compares the row supports of `J_u Q` with those of `J_u` over `points`.
pub fn superset_property(
    inst: &IdentInstance,
    q: &DMatrix<f64>,
    points: &DMatrix<f64>,
    zero_tol: f64,
) -> Result<Vec<SupersetRow>> {
    if q.nrows() != inst.d_s || q.ncols() != inst.d_s {
        return Err(Error::InvalidArgument("Q must be d_s x d_s".into()));
    }
    let sv = q.singular_values();
    if !(sv.min() > 1e-12 * sv.max()) {
        return Err(Error::Singular("Q".into()));
    }
    let truth = row_supports(&stack_jacobians(inst, points, None), inst.d_g(), zero_tol);
    let est = row_supports(&stack_jacobians(inst, points, Some(q)), inst.d_g(), zero_tol);
    Ok(truth
        .iter()
        .zip(&est)
        .map(|(t, e)| SupersetRow {
            estimated: e.len(),
            truth: t.len(),
            holds: e.len() >= t.len(),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnmixConfig {
    pub n_points: usize,
    pub lambda: f64,
    pub mu: f64,
    pub iters: usize,
    pub step: f64,
    pub seed: u64,
    /// Random-rotation starts tried after the identity start.
    pub restarts: usize,
    /// Run the greedy l0 descent after the l1 stage.
    pub l0_descent: bool,
}

impl Default for UnmixConfig {
    fn default() -> Self {
        UnmixConfig {
            n_points: 512,
            lambda: 1.0,
            mu: 0.1,
            iters: 5000,
            step: 1e-2,
            seed: 0,
            restarts: 0,
            l0_descent: true,
        }
    }
}

/// Smoothed objective `lambda/n * sum sqrt(x^2 + eps^2) - mu * log|det Q|`
/// over the stacked Jacobian `g` (`n` points), and its gradient in `Q`.
pub fn objective_and_gradient(
    g: &DMatrix<f64>,
    n_points: usize,
    q: &DMatrix<f64>,
    lambda: f64,
    mu: f64,
    eps: f64,
) -> Result<(f64, DMatrix<f64>)> {
    let lu = q.clone().lu();
    let det = lu.determinant();
    if !(det.abs() > 0.0) {
        return Err(Error::Singular("Q".into()));
    }
    let q_inv = lu.try_inverse().ok_or_else(|| Error::Singular("Q".into()))?;
    let gq = g * q;
    let scale = lambda / n_points as f64;
    let mut value = 0.0;
    let mut dh = gq.clone();
    for x in dh.iter_mut() {
        let r = (*x * *x + eps * eps).sqrt();
        value += r - eps;
        *x /= r;
    }
    let grad = g.transpose() * dh * scale - q_inv.transpose() * mu;
    Ok((scale * value - mu * det.abs().ln(), grad))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnmixResult {
    /// Decoder `x = Q s_hat`.
    #[serde(serialize_with = "ser_rows")]
    pub q_hat: DMatrix<f64>,
    /// Latent map `s_hat = W s`, `W = Q^-1 A`.
    #[serde(serialize_with = "ser_rows")]
    pub latent_map: DMatrix<f64>,
    /// `permutation[j - 1] = pi(j)`, 1-based.
    pub permutation: Vec<usize>,
    /// Per task: rows `pi(I_k)` of `W` vanish outside columns `I_k` and the
    /// `I_k` block is invertible.
    pub block_verdict: Vec<bool>,
    /// Per task: rows outside `pi(I_k)` vanish on columns `I_k`. Reported,
    /// not required.
    pub complement_verdict: Vec<bool>,
    pub off_block_max: f64,
    /// Support counts of `J_u T` rows after thresholding, and of `J_u`.
    pub l0_counts: Vec<usize>,
    pub l0_truth: Vec<usize>,
    pub objective_trace: Vec<f64>,
    /// Index of the start that was kept; 0 is the identity start.
    pub chosen_start: usize,
}

impl UnmixResult {
    pub fn success(&self) -> bool {
        self.block_verdict.iter().all(|&b| b)
            && self.off_block_max < OFF_BLOCK_TOL
            && self.l0_counts.iter().zip(&self.l0_truth).all(|(e, t)| e <= t)
    }

    /// Estimated latents `s_hat = W s` for the rows of `s` (`n x d_s`).
    pub fn estimate(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        s * self.latent_map.transpose()
    }
}

/// Symmetric square root of the sample covariance of the observations
/// `x = A s` at the given latents (rows). With white latents, `Q = root * R`
/// for orthogonal `R` makes `T = A^-1 Q` close to orthogonal.
fn covariance_root(inst: &IdentInstance, points: &DMatrix<f64>) -> DMatrix<f64> {
    let x = points * inst.mixing.transpose();
    let cov = x.transpose() * &x / points.nrows() as f64;
    let eig = cov.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

fn random_rotation<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    g.qr().q()
}

/// Minimizes the smoothed objective over decoders `Q = root * R` with `R`
/// orthogonal, then polishes `Q` (see [`polish`]). Starts from `R = I` and
/// from `cfg.restarts` random rotations; the start with the fewest active
/// (task, column) pairs, then the smallest l1 value, is scored.
pub fn sparse_unmix(inst: &IdentInstance, cfg: &UnmixConfig) -> Result<UnmixResult> {
    if !(cfg.lambda > 0.0) || !(cfg.mu > 0.0) || cfg.iters == 0 || !(cfg.step > 0.0) || cfg.n_points == 0 {
        return Err(Error::InvalidArgument(
            "unmixing needs lambda > 0, mu > 0, step > 0, iters >= 1 and n_points >= 1".into(),
        ));
    }
    let points = inst.sample_latents(cfg.n_points, cfg.seed);
    let g = inst.generalist_jacobians(&points)?;
    let d_g = inst.d_g();
    let root = covariance_root(inst, &points);
    let d = inst.d_s;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut best: Option<((usize, f64), DMatrix<f64>, Vec<f64>, usize)> = None;
    for start in 0..=cfg.restarts {
        let r0 = if start == 0 { DMatrix::identity(d, d) } else { random_rotation(d, &mut init_rng) };
        let (r, mut trace) = rotation_descent(&root, r0, cfg.iters, cfg.step, (1e-1, 1e-7), |q, eps| {
            objective_and_gradient(&g, cfg.n_points, q, cfg.lambda, cfg.mu, eps)
        })?;
        let q = polish(&g, d_g, &root * r, cfg.l0_descent);
        if !(q.determinant().abs() > DET_FLOOR) {
            continue;
        }
        let (f, _) = objective_and_gradient(&g, cfg.n_points, &q, cfg.lambda, cfg.mu, 1e-9)?;
        trace.push(f);
        let active = activity(&g, d_g, &q).iter().flatten().filter(|a| **a).count();
        let key = (active, (&g * &q).abs().sum());
        if best.as_ref().is_none_or(|(k, ..)| key.0 < k.0 || (key.0 == k.0 && key.1 < k.1)) {
            best = Some((key, q, trace, start));
        }
    }
    match best {
        Some((_, q, trace, start)) => score(inst, &points, q, trace, start),
        None => Err(Error::DetCollapse(cfg.restarts)),
    }
}

/// Riemannian gradient descent on the orthogonal group with Cayley
/// retraction and normalized steps. The smoothing width runs geometrically
/// from `eps.0` to `eps.1` and the step angle from `step` to `step * 1e-4`.
/// The trace records the objective every 50 iterations.
fn rotation_descent<F>(
    root: &DMatrix<f64>,
    mut r: DMatrix<f64>,
    iters: usize,
    step: f64,
    eps: (f64, f64),
    objective: F,
) -> Result<(DMatrix<f64>, Vec<f64>)>
where
    F: Fn(&DMatrix<f64>, f64) -> Result<(f64, DMatrix<f64>)>,
{
    let d = r.ncols();
    let id = DMatrix::<f64>::identity(d, d);
    let (lr0, lr1) = (step, step * 1e-4);
    let mut trace = Vec::new();
    for it in 0..iters {
        let frac = it as f64 / iters as f64;
        let eps_t = eps.0 * (eps.1 / eps.0).powf(frac);
        let lr = lr0 * (lr1 / lr0).powf(frac);
        let (f, grad_q) = objective(&(root * &r), eps_t)?;
        if it % 50 == 0 {
            trace.push(f);
        }
        let e = root.transpose() * grad_q;
        let omega = (r.transpose() * &e - e.transpose() * &r) * 0.5;
        let norm = omega.norm();
        if norm == 0.0 {
            break;
        }
        let half = &omega * (lr * 0.5 / norm);
        let cayley = (&id + &half)
            .try_inverse()
            .ok_or_else(|| Error::Singular("Cayley step".into()))?
            * (&id - &half);
        r = &r * cayley;
    }
    Ok((r, trace))
}

/// Activity pattern of `G Q`: entry `(i, c)` is active when its mean
/// magnitude exceeds 1% of the largest mean in column `c`. Columns whose
/// largest mean is negligible against the whole matrix are inactive on
/// every task.
pub fn activity(g: &DMatrix<f64>, d_g: usize, q: &DMatrix<f64>) -> Vec<Vec<bool>> {
    let gq = g * q;
    let d = q.ncols();
    let mut mean = DMatrix::<f64>::zeros(d_g, d);
    for (r, row) in gq.row_iter().enumerate() {
        for c in 0..d {
            mean[(r % d_g, c)] += row[c].abs();
        }
    }
    let global = mean.max();
    (0..d)
        .map(|c| {
            let col_max = mean.column(c).max();
            (0..d_g)
                .map(|i| col_max > 1e-3 * global && mean[(i, c)] > 1e-2 * col_max)
                .collect()
        })
        .collect()
}

/// Orthonormal basis of the common null space of the Jacobian rows of the
/// given tasks, as columns.
fn null_basis(g: &DMatrix<f64>, d_g: usize, tasks: &[usize]) -> DMatrix<f64> {
    let d = g.ncols();
    let rows: Vec<usize> = (0..g.nrows()).filter(|r| tasks.contains(&(r % d_g))).collect();
    let sub = g.select_rows(&rows);
    let eig = (sub.transpose() * &sub).symmetric_eigen();
    let hi = eig.eigenvalues.max();
    let null: Vec<usize> = (0..d).filter(|&k| eig.eigenvalues[k] <= 1e-10 * hi).collect();
    eig.eigenvectors.select_columns(&null)
}

fn unit_columns(q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = q.clone();
    for mut col in out.column_iter_mut() {
        col /= col.norm();
    }
    out
}

/// Snaps each column of `Q` onto the exact null space of the tasks it is
/// already inactive on, then optionally runs a greedy l0 descent: a column may move
/// into the null space of one more task, along the direction that keeps it
/// furthest from the span of the other columns, as long as the unit-column
/// determinant stays above `MIN_UNIT_DET`. Every accepted move removes at
/// least one active (task, column) pair.
pub fn polish(g: &DMatrix<f64>, d_g: usize, mut q: DMatrix<f64>, l0_descent: bool) -> DMatrix<f64> {
    let d = q.ncols();
    let active = activity(g, d_g, &q);
    for c in 0..d {
        let inactive: Vec<usize> = (0..d_g).filter(|&i| !active[c][i]).collect();
        if inactive.is_empty() {
            continue;
        }
        let basis = null_basis(g, d_g, &inactive);
        let projected = &basis * (basis.transpose() * q.column(c));
        if projected.norm() > 1e-3 * q.column(c).norm() {
            q.set_column(c, &projected.normalize());
        }
    }
    'descent: while l0_descent {
        let active = activity(g, d_g, &q);
        let Some(q_inv) = q.clone().try_inverse() else { break };
        for c in 0..d {
            for extra in (0..d_g).filter(|&i| active[c][i]) {
                let tasks: Vec<usize> = (0..d_g).filter(|&i| !active[c][i] || i == extra).collect();
                let basis = null_basis(g, d_g, &tasks);
                if basis.ncols() == 0 {
                    continue;
                }
                let normal = q_inv.row(c).transpose();
                let candidate = &basis * (basis.transpose() * normal);
                if candidate.norm() < 1e-9 {
                    continue;
                }
                let mut trial = q.clone();
                trial.set_column(c, &candidate.normalize());
                if unit_columns(&trial).determinant().abs() > MIN_UNIT_DET {
                    q = trial;
                    continue 'descent;
                }
            }
        }
        break;
    }
    unit_columns(&q)
}

/// Scales each row to unit max magnitude.
fn row_normalized(w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = w.clone();
    for mut row in out.row_iter_mut() {
        let hi = row.amax();
        if hi > 0.0 {
            row /= hi;
        }
    }
    out
}

/// Largest off-block entry of rows `pi(I_k)` over all tasks, for a given
/// assignment `perm[j] = pi(j)` (0-based).
fn off_block_score(wn: &DMatrix<f64>, supports: &[BTreeSet<usize>], perm: &[usize]) -> f64 {
    let d = wn.ncols();
    let mut worst: f64 = 0.0;
    for sup in supports {
        for &j in sup {
            let row = perm[j - 1];
            for c in 0..d {
                if !sup.contains(&(c + 1)) {
                    worst = worst.max(wn[(row, c)].abs());
                }
            }
        }
    }
    worst
}

/// Permutation minimizing the off-block score; the first in lexicographic
/// order wins ties.
pub fn best_permutation(w: &DMatrix<f64>, supports: &[BTreeSet<usize>]) -> Result<(Vec<usize>, f64)> {
    let d = w.ncols();
    if d > MAX_EXHAUSTIVE_DIM {
        return Err(Error::InvalidArgument(format!(
            "permutation search supports d_s <= {MAX_EXHAUSTIVE_DIM}, got {d}"
        )));
    }
    let wn = row_normalized(w);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in (0..d).permutations(d) {
        let score = off_block_score(&wn, supports, &perm);
        if best.as_ref().is_none_or(|(_, s)| score < *s) {
            best = Some((perm, score));
        }
    }
    Ok(best.expect("at least one permutation"))
}

fn score(
    inst: &IdentInstance,
    points: &DMatrix<f64>,
    q: DMatrix<f64>,
    trace: Vec<f64>,
    chosen_start: usize,
) -> Result<UnmixResult> {
    let q_inv = q.clone().try_inverse().ok_or_else(|| Error::Singular("Q".into()))?;
    let w = &q_inv * &inst.mixing;
    let (perm, off_block_max) = best_permutation(&w, &inst.supports)?;
    let wn = row_normalized(&w);
    let d = inst.d_s;

    let mut block_verdict = Vec::new();
    let mut complement_verdict = Vec::new();
    for sup in &inst.supports {
        let rows: Vec<usize> = sup.iter().map(|&j| perm[j - 1]).collect();
        let cols: Vec<usize> = sup.iter().map(|&j| j - 1).collect();
        let off = off_block_score(&wn, std::slice::from_ref(sup), &perm);
        let block = w.select_rows(&rows).select_columns(&cols);
        let sv = block.singular_values();
        block_verdict.push(off < OFF_BLOCK_TOL && sv.min() > 1e-8 * sv.max());
        let comp_ok = (0..d)
            .filter(|r| !rows.contains(r))
            .all(|r| cols.iter().all(|&c| wn[(r, c)].abs() < OFF_BLOCK_TOL));
        complement_verdict.push(comp_ok);
    }

    let t = inst.mixing_inverse()? * &q;
    let est = row_supports(&stack_jacobians(inst, points, Some(&t)), inst.d_g(), ZERO_TOL);
    let truth = row_supports(&stack_jacobians(inst, points, None), inst.d_g(), ZERO_TOL);
    Ok(UnmixResult {
        q_hat: q,
        latent_map: w,
        permutation: perm.iter().map(|p| p + 1).collect(),
        block_verdict,
        complement_verdict,
        off_block_max,
        l0_counts: est.iter().map(BTreeSet::len).collect(),
        l0_truth: truth.iter().map(BTreeSet::len).collect(),
        objective_trace: trace,
        chosen_start,
    })
}

/// Mean R^2 of least-squares regressions (with intercept) of each target
/// column on the predictor columns, clipped to `[0, 1]`.
fn mean_r2(targets: &DMatrix<f64>, predictors: &DMatrix<f64>) -> Result<f64> {
    let n = predictors.nrows();
    let p = predictors.ncols() + 1;
    if n <= p {
        return Err(Error::InvalidArgument(format!("{n} samples for {p} regressors")));
    }
    if targets.ncols() == 0 {
        return Ok(0.0);
    }
    let mut x = DMatrix::from_element(n, p, 1.0);
    x.view_mut((0, 1), (n, p - 1)).copy_from(predictors);
    let svd = x.clone().svd(true, true);
    let beta = svd.solve(targets, 1e-12).map_err(|e| Error::Singular(e.to_string()))?;
    let resid = targets - &x * beta;
    let mut total = 0.0;
    for c in 0..targets.ncols() {
        let col = targets.column(c);
        let mean = col.mean();
        let ss_tot: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        let ss_res = resid.column(c).norm_squared();
        let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
        total += r2.clamp(0.0, 1.0);
    }
    Ok(total / targets.ncols() as f64)
}

/// `(r2_relevant, r2_irrelevant)` for task support `support` (1-based):
/// how well `s_hat[pi(I_k)]` explains `s[I_k]` and the remaining latents.
/// `permutation` is 1-based as in [`UnmixResult`].
pub fn group_r2(
    s: &DMatrix<f64>,
    s_hat: &DMatrix<f64>,
    support: &BTreeSet<usize>,
    permutation: &[usize],
) -> Result<(f64, f64)> {
    if s.nrows() != s_hat.nrows() {
        return Err(Error::InvalidArgument("sample counts differ".into()));
    }
    let d = s.ncols();
    let rel: Vec<usize> = support.iter().map(|&j| j - 1).collect();
    let irr: Vec<usize> = (0..d).filter(|c| !rel.contains(c)).collect();
    let pred: Vec<usize> = support.iter().map(|&j| permutation[j - 1] - 1).collect();
    let x = s_hat.select_columns(&pred);
    Ok((
        mean_r2(&s.select_columns(&rel), &x)?,
        mean_r2(&s.select_columns(&irr), &x)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TaskR2 {
    pub task: usize,
    pub r2_relevant: f64,
    pub r2_irrelevant: f64,
}

/// [`group_r2`] for every task on `n` fresh latent samples.
pub fn evaluate_r2(inst: &IdentInstance, result: &UnmixResult, n: usize, seed: u64) -> Result<Vec<TaskR2>> {
    let s = inst.sample_latents(n, seed);
    let s_hat = result.estimate(&s);
    inst.supports
        .iter()
        .enumerate()
        .map(|(i, sup)| {
            let (r2_relevant, r2_irrelevant) = group_r2(&s, &s_hat, sup, &result.permutation)?;
            Ok(TaskR2 {
                task: i + 1,
                r2_relevant,
                r2_irrelevant,
            })
        })
        .collect()
}

//! Conditional-independence queries through three interchangeable backends:
//! the graph's d-separation oracle, partial correlations of the exact
//! covariance, and the Fisher z-test on sample data.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::graph::{ConditioningSet, NodeId, TemporalGraph};
use crate::scm::{Dataset, VarLayout};

/// Partial correlations below this magnitude count as zero for the analytic
/// backend.
pub const DEFAULT_ANALYTIC_ATOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    GraphOracle,
    AnalyticCorr,
    FisherZ,
}

impl Backend {
    pub fn tag(&self) -> &'static str {
        match self {
            Backend::GraphOracle => "graph-oracle",
            Backend::AnalyticCorr => "analytic-corr",
            Backend::FisherZ => "fisher-z",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graph-oracle" | "oracle" => Ok(Backend::GraphOracle),
            "analytic-corr" | "analytic" => Ok(Backend::AnalyticCorr),
            "fisher-z" | "fisherz" => Ok(Backend::FisherZ),
            _ => Err(Error::Parse(format!(
                "unknown backend '{s}' (expected graph-oracle, analytic-corr or fisher-z)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CiQuery {
    pub x: NodeId,
    pub y: NodeId,
    pub z: ConditioningSet,
    pub backend: Backend,
    pub alpha: f64,
    /// Restrict the test to one coordinate of `x` / `y` (1-based).
    pub x_coord: Option<usize>,
    pub y_coord: Option<usize>,
}

impl CiQuery {
    pub fn new(x: NodeId, y: NodeId, z: ConditioningSet, backend: Backend, alpha: f64) -> Self {
        CiQuery {
            x,
            y,
            z,
            backend,
            alpha,
            x_coord: None,
            y_coord: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiResult {
    pub dependent: bool,
    /// 0/1 for the oracle, `max |r|` for the analytic backend and the z
    /// statistic of the most significant coordinate pair for Fisher z.
    pub statistic: f64,
    pub p_value: Option<f64>,
    pub backend: Backend,
    pub n_effective: Option<usize>,
}

/// A covariance matrix together with its column layout.
#[derive(Clone, Debug)]
pub struct CovarianceSource {
    pub layout: VarLayout,
    pub cov: DMatrix<f64>,
}

impl CovarianceSource {
    pub fn new(layout: VarLayout, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != layout.width() || cov.ncols() != layout.width() {
            return Err(Error::InvalidArgument(format!(
                "covariance is {}x{}, layout has {} columns",
                cov.nrows(),
                cov.ncols(),
                layout.width()
            )));
        }
        Ok(CovarianceSource { layout, cov })
    }

    /// Coordinate columns of `node`, optionally narrowed to one coordinate.
    fn columns_of(&self, node: &NodeId, coord: Option<usize>) -> Result<Vec<usize>> {
        let block = self
            .layout
            .block(node)
            .ok_or_else(|| Error::MissingVariables(node.to_string()))?;
        match coord {
            None => Ok(block.collect()),
            Some(c) => self
                .layout
                .column(node, c)
                .map(|col| vec![col])
                .ok_or_else(|| Error::InvalidArgument(format!("{node} has no coordinate {c}"))),
        }
    }

    fn z_columns(&self, z: &ConditioningSet) -> Result<Vec<usize>> {
        self.layout.require(z.nodes())?;
        Ok(z.nodes().iter().flat_map(|n| self.layout.block(n).expect("checked")).collect())
    }

    /// Partial correlations of every `(x, y)` coordinate pair given all
    /// coordinates of `z`, with the conditioning column count.
    fn pairwise(&self, q: &CiQuery) -> Result<(Vec<f64>, usize)> {
        let xs = self.columns_of(&q.x, q.x_coord)?;
        let ys = self.columns_of(&q.y, q.y_coord)?;
        let zc = self.z_columns(&q.z)?;
        let mut rs = Vec::with_capacity(xs.len() * ys.len());
        for &cx in &xs {
            for &cy in &ys {
                rs.push(partial_correlation(&self.cov, cx, cy, &zc)?);
            }
        }
        Ok((rs, zc.len()))
    }
}

/// Partial correlation of columns `x` and `y` of `cov` given columns `z`:
/// the negated, scaled off-diagonal of the inverse restricted correlation
/// matrix.
pub fn partial_correlation(cov: &DMatrix<f64>, x: usize, y: usize, z: &[usize]) -> Result<f64> {
    let idx: Vec<usize> = [x, y].into_iter().chain(z.iter().copied()).collect();
    let k = idx.len();
    let sd: Vec<f64> = idx.iter().map(|&i| cov[(i, i)].sqrt()).collect();
    if sd.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::Singular("zero or invalid variance".into()));
    }
    let corr = DMatrix::from_fn(k, k, |a, b| cov[(idx[a], idx[b])] / (sd[a] * sd[b]));
    let chol = corr
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{k}x{k} correlation submatrix")))?;
    let prec = chol.inverse();
    let denom = (prec[(0, 0)] * prec[(1, 1)]).sqrt();
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::Singular("degenerate precision diagonal".into()));
    }
    Ok((-prec[(0, 1)] / denom).clamp(-1.0, 1.0))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Two-sided Fisher z-test of a partial correlation `r` estimated from `n`
/// samples with `z_size` conditioning variables.
pub fn fisher_z_test(r: f64, n: usize, z_size: usize, alpha: f64) -> Result<CiResult> {
    check_alpha(alpha)?;
    if n < z_size + 4 {
        return Err(Error::InsufficientSamples { n, z_size });
    }
    if !r.is_finite() || r.abs() > 1.0 {
        return Err(Error::InvalidArgument(format!("correlation {r} outside [-1, 1]")));
    }
    let (statistic, p) = if r.abs() == 1.0 {
        (f64::INFINITY, 0.0)
    } else {
        let stat = ((n - z_size - 3) as f64).sqrt() * r.atanh().abs();
        (stat, erfc(stat / std::f64::consts::SQRT_2).clamp(0.0, 1.0))
    };
    Ok(CiResult {
        dependent: p < alpha,
        statistic,
        p_value: Some(p),
        backend: Backend::FisherZ,
        n_effective: Some(n),
    })
}

/// Everything a query may need. Each backend uses one part; the sample
/// covariance is computed once at construction.
#[derive(Clone, Debug, Default)]
pub struct CiContext {
    graph: Option<TemporalGraph>,
    analytic: Option<CovarianceSource>,
    sample: Option<(CovarianceSource, usize)>,
    analytic_atol: f64,
}

impl CiContext {
    pub fn new() -> Self {
        CiContext {
            analytic_atol: DEFAULT_ANALYTIC_ATOL,
            ..Default::default()
        }
    }

    pub fn with_graph(mut self, graph: TemporalGraph) -> Self {
        self.graph = Some(graph);
        self
    }

    pub fn with_covariance(mut self, source: CovarianceSource) -> Self {
        self.analytic = Some(source);
        self
    }

    pub fn with_dataset(mut self, data: &Dataset) -> Self {
        let source = CovarianceSource {
            layout: data.layout().clone(),
            cov: data.covariance(),
        };
        self.sample = Some((source, data.n()));
        self
    }

    pub fn with_analytic_atol(mut self, atol: f64) -> Self {
        self.analytic_atol = atol;
        self
    }

    pub fn graph(&self) -> Option<&TemporalGraph> {
        self.graph.as_ref()
    }

    /// Layout of whichever covariance source `backend` reads.
    pub fn layout_for(&self, backend: Backend) -> Option<&VarLayout> {
        match backend {
            Backend::GraphOracle => None,
            Backend::AnalyticCorr => self.analytic.as_ref().map(|s| &s.layout),
            Backend::FisherZ => self.sample.as_ref().map(|(s, _)| &s.layout),
        }
    }

    pub fn sample_size(&self) -> Option<usize> {
        self.sample.as_ref().map(|(_, n)| *n)
    }
}

fn validate_query(q: &CiQuery) -> Result<()> {
    check_alpha(q.alpha)?;
    if q.x == q.y {
        return Err(Error::InvalidArgument(format!("query endpoints coincide ({})", q.x)));
    }
    if q.z.contains(&q.x) || q.z.contains(&q.y) {
        return Err(Error::InvalidArgument(format!(
            "query endpoints {}, {} must not be in the conditioning set {}",
            q.x, q.y, q.z
        )));
    }
    Ok(())
}

/// Runs `q` against the part of `ctx` its backend needs. Vector-valued
/// variables are tested over every coordinate pair; the analytic backend
/// reports dependence if any pair is nonzero and Fisher z combines the
/// pairwise p-values by Bonferroni on the minimum.
pub fn ci_query(q: &CiQuery, ctx: &CiContext) -> Result<CiResult> {
    validate_query(q)?;
    match q.backend {
        Backend::GraphOracle => {
            let g = ctx.graph.as_ref().ok_or(Error::BackendMismatch {
                backend: "graph-oracle",
                needs: "a graph",
            })?;
            let dependent = !g.d_separated(&q.x, &q.y, &q.z)?;
            Ok(CiResult {
                dependent,
                statistic: if dependent { 1.0 } else { 0.0 },
                p_value: None,
                backend: Backend::GraphOracle,
                n_effective: None,
            })
        }
        Backend::AnalyticCorr => {
            let src = ctx.analytic.as_ref().ok_or(Error::BackendMismatch {
                backend: "analytic-corr",
                needs: "a joint covariance",
            })?;
            let (rs, _) = src.pairwise(q)?;
            let max_abs = rs.iter().fold(0.0f64, |m, r| m.max(r.abs()));
            Ok(CiResult {
                dependent: max_abs > ctx.analytic_atol,
                statistic: max_abs,
                p_value: None,
                backend: Backend::AnalyticCorr,
                n_effective: None,
            })
        }
        Backend::FisherZ => {
            let (src, n) = ctx.sample.as_ref().ok_or(Error::BackendMismatch {
                backend: "fisher-z",
                needs: "a dataset",
            })?;
            let (rs, z_size) = src.pairwise(q)?;
            let pairs = rs.len();
            let mut best: Option<CiResult> = None;
            for r in rs {
                let res = fisher_z_test(r, *n, z_size, q.alpha)?;
                if best.as_ref().is_none_or(|b| res.p_value < b.p_value) {
                    best = Some(res);
                }
            }
            let mut res = best.expect("at least one coordinate pair");
            let p = (res.p_value.expect("fisher z has p") * pairs as f64).min(1.0);
            res.p_value = Some(p);
            res.dependent = p < q.alpha;
            Ok(res)
        }
    }
}

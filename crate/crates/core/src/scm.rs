//! Linear-Gaussian structural causal model on a temporal graph: parameters,
//! ancestral sampling, the exact joint covariance and invertible
//! observation maps.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, NodeKind, TemporalGraph};

/// Per-kind variable dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Dims {
    pub state: usize,
    pub action: usize,
    pub task: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { state: 1, action: 1, task: 1 }
    }
}

impl Dims {
    pub fn of(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::State => self.state,
            NodeKind::Action => self.action,
            NodeKind::Task => self.task,
        }
    }
}

/// Column layout of a dataset: which column holds which `(node, coordinate)`.
/// Coordinates are 1-based, matching the `s[t].j` column names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VarLayout {
    columns: Vec<(NodeId, usize)>,
    blocks: BTreeMap<NodeId, Range<usize>>,
}

impl VarLayout {
    /// Layout of every node of `graph`, nodes in canonical order.
    pub fn for_graph(graph: &TemporalGraph, dims: Dims) -> Self {
        let columns = graph
            .nodes()
            .into_iter()
            .flat_map(|node| (1..=dims.of(node.kind)).map(move |j| (node, j)))
            .collect();
        Self::from_columns(columns).expect("graph layout is well formed")
    }

    /// Accepts any column order as long as every node's coordinates are
    /// contiguous and numbered `1..=d`.
    pub fn from_columns(columns: Vec<(NodeId, usize)>) -> Result<Self> {
        let mut blocks: BTreeMap<NodeId, Range<usize>> = BTreeMap::new();
        for (c, &(node, j)) in columns.iter().enumerate() {
            match blocks.get_mut(&node) {
                None if j == 1 => {
                    blocks.insert(node, c..c + 1);
                }
                Some(r) if r.end == c && j == r.len() + 1 => r.end = c + 1,
                _ => {
                    return Err(Error::Parse(format!(
                        "column {node}.{j} is out of place (coordinates must be contiguous and 1-based)"
                    )))
                }
            }
        }
        Ok(VarLayout { columns, blocks })
    }

    pub fn parse_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let columns = names
            .iter()
            .map(|name| {
                let name = name.as_ref();
                let (node, coord) = name
                    .rsplit_once('.')
                    .ok_or_else(|| Error::Parse(format!("bad column name '{name}'")))?;
                let coord = coord
                    .parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad column name '{name}'")))?;
                Ok((node.parse::<NodeId>()?, coord))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_columns(columns)
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|(n, j)| format!("{n}.{j}")).collect()
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[(NodeId, usize)] {
        &self.columns
    }

    pub fn contains(&self, node: &NodeId) -> bool {
        self.blocks.contains_key(node)
    }

    /// Column range holding `node`.
    pub fn block(&self, node: &NodeId) -> Option<Range<usize>> {
        self.blocks.get(node).cloned()
    }

    pub fn column(&self, node: &NodeId, coord: usize) -> Option<usize> {
        let r = self.blocks.get(node)?;
        (coord >= 1 && coord <= r.len()).then(|| r.start + coord - 1)
    }

    /// Fails with every node of `nodes` that has no column, by name.
    pub fn require(&self, nodes: &[NodeId]) -> Result<()> {
        let missing: Vec<String> = nodes
            .iter()
            .filter(|n| !self.contains(n))
            .map(|n| n.to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingVariables(missing.join(", ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScmConfig {
    pub dims: Dims,
    /// Coefficient magnitudes are uniform on `[coeff_min, coeff_max]` with a
    /// random sign.
    pub coeff_min: f64,
    pub coeff_max: f64,
    pub noise_std: f64,
    /// Scale each coefficient by the inverse marginal std of its parent
    /// coordinate, which keeps variances bounded along long chains.
    pub standardize_parents: bool,
}

impl Default for ScmConfig {
    fn default() -> Self {
        ScmConfig {
            dims: Dims::default(),
            coeff_min: 0.5,
            coeff_max: 1.5,
            noise_std: 1.0,
            standardize_parents: false,
        }
    }
}

impl ScmConfig {
    fn validate(&self) -> Result<()> {
        if !(self.coeff_min > 0.0) || !(self.coeff_max >= self.coeff_min) || !self.coeff_max.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "coefficient range must satisfy 0 < c_min <= c_max, got [{}, {}]",
                self.coeff_min, self.coeff_max
            )));
        }
        if !(self.noise_std > 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidArgument(format!("noise std must be > 0, got {}", self.noise_std)));
        }
        if self.dims.state == 0 || self.dims.action == 0 || self.dims.task == 0 {
            return Err(Error::InvalidArgument("variable dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

/// Raw coefficient block of one edge, `child_dim x parent_dim`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EdgeCoefficients {
    pub from: NodeId,
    pub to: NodeId,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ScmParams {
    graph: TemporalGraph,
    config: ScmConfig,
    seed: u64,
    layout: VarLayout,
    edges: Vec<EdgeCoefficients>,
    /// Effective structural matrix: `x = B x + e`, strictly lower triangular.
    weights: DMatrix<f64>,
    /// Nonzero entries of each row of `weights`.
    row_terms: Vec<Vec<(usize, f64)>>,
}

/// Draws coefficients for every edge of `graph`, deterministically in `seed`.
pub fn parameterize(graph: &TemporalGraph, config: &ScmConfig, seed: u64) -> Result<ScmParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = config.dims;
    let edges: Vec<EdgeCoefficients> = graph
        .edges()
        .into_iter()
        .map(|(from, to)| {
            let matrix = (0..dims.of(to.kind))
                .map(|_| {
                    (0..dims.of(from.kind))
                        .map(|_| {
                            let mag = rng.random_range(config.coeff_min..=config.coeff_max);
                            if rng.random_bool(0.5) {
                                mag
                            } else {
                                -mag
                            }
                        })
                        .collect()
                })
                .collect();
            EdgeCoefficients { from, to, matrix }
        })
        .collect();

    let layout = VarLayout::for_graph(graph, dims);
    let d = layout.width();
    let mut weights = DMatrix::zeros(d, d);
    for e in &edges {
        let rows = layout.block(&e.to).expect("edge target in layout");
        let cols = layout.block(&e.from).expect("edge source in layout");
        for (a, r) in rows.enumerate() {
            for (b, c) in cols.clone().enumerate() {
                weights[(r, c)] = e.matrix[a][b];
            }
        }
    }
    if config.standardize_parents {
        standardize(&mut weights, config.noise_std);
    }
    let row_terms = (0..d)
        .map(|r| (0..r).filter(|&c| weights[(r, c)] != 0.0).map(|c| (c, weights[(r, c)])).collect())
        .collect();
    Ok(ScmParams {
        graph: graph.clone(),
        config: config.clone(),
        seed,
        layout,
        edges,
        weights,
        row_terms,
    })
}

/// Divides each coefficient by the marginal std of its parent column. The
/// covariance is grown one row at a time in topological order, so every
/// parent variance is final before it is used.
fn standardize(weights: &mut DMatrix<f64>, noise_std: f64) {
    let d = weights.nrows();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in 0..d {
        for c in 0..r {
            if weights[(r, c)] != 0.0 {
                weights[(r, c)] /= cov[(c, c)].sqrt();
            }
        }
        let parents: Vec<usize> = (0..r).filter(|&c| weights[(r, c)] != 0.0).collect();
        for m in 0..r {
            let v: f64 = parents.iter().map(|&p| weights[(r, p)] * cov[(p, m)]).sum();
            cov[(r, m)] = v;
            cov[(m, r)] = v;
        }
        let var: f64 = parents.iter().map(|&p| weights[(r, p)] * cov[(p, r)]).sum();
        cov[(r, r)] = var + noise_std * noise_std;
    }
}

impl ScmParams {
    pub fn graph(&self) -> &TemporalGraph {
        &self.graph
    }

    pub fn config(&self) -> &ScmConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layout(&self) -> &VarLayout {
        &self.layout
    }

    pub fn edges(&self) -> &[EdgeCoefficients] {
        &self.edges
    }

    /// Number of scalar coefficients over all edges.
    pub fn coefficient_count(&self) -> usize {
        self.edges.iter().map(|e| e.matrix.iter().map(Vec::len).sum::<usize>()).sum()
    }

    /// Effective structural matrix `B` (after parent standardization).
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// `Sigma = (I - B)^-1 Omega (I - B)^-T`.
    pub fn joint_covariance(&self) -> Result<DMatrix<f64>> {
        let d = self.layout.width();
        let i_minus_b = DMatrix::<f64>::identity(d, d) - &self.weights;
        let inv = i_minus_b
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::Singular("I - B".into()))?;
        let var = self.config.noise_std * self.config.noise_std;
        let sigma = &inv * inv.transpose() * var;
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        if sigma.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(sigma)
    }

    /// `n` i.i.d. trajectories. Row `r` draws its noise from its own ChaCha
    /// stream `(seed, r)`, so the output does not depend on scheduling.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be >= 1".into()));
        }
        let d = self.layout.width();
        let sd = self.config.noise_std;
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(r as u64);
                let mut x = vec![0.0; d];
                for c in 0..d {
                    let e: f64 = rng.sample(StandardNormal);
                    x[c] = self.row_terms[c].iter().map(|&(p, b)| b * x[p]).sum::<f64>() + sd * e;
                }
                x
            })
            .collect();
        Ok(Dataset::from_rows(self.layout.clone(), &rows))
    }
}

/// Samples as an `n x D` matrix with its column layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    layout: VarLayout,
    samples: DMatrix<f64>,
}

impl Dataset {
    pub fn new(layout: VarLayout, samples: DMatrix<f64>) -> Result<Self> {
        if samples.ncols() != layout.width() {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} columns, layout has {}",
                samples.ncols(),
                layout.width()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("dataset contains non-finite values".into()));
        }
        Ok(Dataset { layout, samples })
    }

    fn from_rows(layout: VarLayout, rows: &[Vec<f64>]) -> Self {
        let d = layout.width();
        let samples = DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]);
        Dataset { layout, samples }
    }

    pub fn layout(&self) -> &VarLayout {
        &self.layout
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn n(&self) -> usize {
        self.samples.nrows()
    }

    pub fn means(&self) -> DVector<f64> {
        self.samples.row_mean().transpose()
    }

    /// Unbiased sample covariance (divisor `n - 1`).
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.n();
        let mean = self.samples.row_mean();
        let mut centered = self.samples.clone();
        for mut row in centered.row_iter_mut() {
            row -= &mean;
        }
        let denom = (n.max(2) - 1) as f64;
        centered.transpose() * &centered / denom
    }
}

/// Per-step invertible maps `o_t = A_t s_t` applied to the state blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationMap {
    maps: BTreeMap<usize, DMatrix<f64>>,
}

const MAX_COND: f64 = 100.0;
const MAX_DRAWS: usize = 1000;

impl ObservationMap {
    pub fn identity(steps: usize, state_dim: usize) -> Self {
        ObservationMap {
            maps: (1..=steps).map(|t| (t, DMatrix::identity(state_dim, state_dim))).collect(),
        }
    }

    /// Random `A_t` with Gaussian entries and condition number at most 100.
    pub fn random(steps: usize, state_dim: usize, obs_dim: usize, seed: u64) -> Result<Self> {
        if obs_dim != state_dim {
            return Err(Error::InvalidArgument(format!(
                "observation dim {obs_dim} must equal state dim {state_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut maps = BTreeMap::new();
        for t in 1..=steps {
            maps.insert(t, random_well_conditioned(state_dim, &mut rng)?);
        }
        Ok(ObservationMap { maps })
    }

    pub fn step(&self, t: usize) -> Option<&DMatrix<f64>> {
        self.maps.get(&t)
    }

    /// Block-diagonal `K` over the full layout, `A_t` on state blocks and the
    /// identity elsewhere.
    pub fn full_matrix(&self, layout: &VarLayout) -> Result<DMatrix<f64>> {
        let d = layout.width();
        let mut k = DMatrix::identity(d, d);
        for (&t, a) in &self.maps {
            let Some(block) = layout.block(&NodeId::state(t)) else {
                continue;
            };
            if block.len() != a.nrows() {
                return Err(Error::InvalidArgument(format!(
                    "state s[{t}] has dimension {}, map has {}",
                    block.len(),
                    a.nrows()
                )));
            }
            k.view_mut((block.start, block.start), (block.len(), block.len())).copy_from(a);
        }
        Ok(k)
    }

    pub fn apply_dataset(&self, data: &Dataset) -> Result<Dataset> {
        let k = self.full_matrix(&data.layout)?;
        Ok(Dataset {
            layout: data.layout.clone(),
            samples: &data.samples * k.transpose(),
        })
    }

    pub fn apply_covariance(&self, layout: &VarLayout, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let k = self.full_matrix(layout)?;
        Ok(&k * sigma * k.transpose())
    }
}

pub(crate) fn random_well_conditioned<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    for _ in 0..MAX_DRAWS {
        let a = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
        let sv = a.singular_values();
        let (lo, hi) = (sv.min(), sv.max());
        if lo > 1e-3 && hi / lo <= MAX_COND {
            return Ok(a);
        }
    }
    Err(Error::SingularDraw(MAX_DRAWS))
}

/// Replaces every state block by `o_t = A_t s_t` with fresh random `A_t`.
pub fn observe(data: &Dataset, obs_dim: usize, mixing_seed: u64) -> Result<(Dataset, ObservationMap)> {
    let steps = data
        .layout
        .columns()
        .iter()
        .filter(|(n, _)| n.kind == NodeKind::State)
        .map(|(n, _)| n.index)
        .max()
        .unwrap_or(0);
    let state_dim = data.layout.block(&NodeId::state(1)).map_or(0, |r| r.len());
    let map = ObservationMap::random(steps, state_dim, obs_dim, mixing_seed)?;
    let observed = map.apply_dataset(data)?;
    Ok((observed, map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{demo_graph, TaskIncidence};
    use approx::assert_relative_eq;

    #[test]
    fn unit_chain_covariance() {
        // s1 -> s2 only matters here; with unit coefficients s1 has
        // variance 1, so standardization leaves the coefficient alone.
        let d = 2;
        let mut w = DMatrix::zeros(d, d);
        w[(1, 0)] = 1.0;
        standardize(&mut w, 1.0);
        assert_eq!(w[(1, 0)], 1.0);
        let inv = (DMatrix::<f64>::identity(d, d) - &w)
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .unwrap();
        let sigma = &inv * inv.transpose();
        assert_relative_eq!(sigma[(0, 0)], 1.0);
        assert_relative_eq!(sigma[(1, 1)], 2.0);
        assert_relative_eq!(sigma[(0, 1)], 1.0);
    }

    #[test]
    fn parameterize_is_deterministic_and_counts_edges() {
        let g = demo_graph();
        let cfg = ScmConfig::default();
        let a = parameterize(&g, &cfg, 11).unwrap();
        let b = parameterize(&g, &cfg, 11).unwrap();
        assert_eq!(a.edges(), b.edges());
        assert_eq!(a.weights(), b.weights());
        assert_eq!(a.coefficient_count(), g.edge_count());
        for e in a.edges() {
            for &c in e.matrix.iter().flatten() {
                assert!((0.5..=1.5).contains(&c.abs()));
            }
        }
    }

    #[test]
    fn coefficient_count_scales_with_dims() {
        let g = demo_graph();
        let cfg = ScmConfig {
            dims: Dims { state: 2, action: 3, task: 1 },
            ..ScmConfig::default()
        };
        let p = parameterize(&g, &cfg, 1).unwrap();
        let want: usize = g.edges().iter().map(|(f, t)| cfg.dims.of(f.kind) * cfg.dims.of(t.kind)).sum();
        assert_eq!(p.coefficient_count(), want);
        assert_eq!(p.layout().width(), 10 * 2 + 10 * 3 + 1);
    }

    #[test]
    fn rejects_bad_config() {
        let g = demo_graph();
        let zero = ScmConfig { coeff_min: 0.0, ..ScmConfig::default() };
        assert!(parameterize(&g, &zero, 0).is_err());
        let swapped = ScmConfig { coeff_min: 2.0, coeff_max: 1.0, ..ScmConfig::default() };
        assert!(parameterize(&g, &swapped, 0).is_err());
    }

    #[test]
    fn standardized_variances_are_bounded() {
        let inc = TaskIncidence::from_pairs(10, 1, &[(1, 1), (10, 1)]).unwrap();
        let g = TemporalGraph::build(20, 2, 1, inc, vec![true; 19]).unwrap();
        let cfg = ScmConfig {
            coeff_min: 1.5,
            coeff_max: 1.5,
            standardize_parents: true,
            ..ScmConfig::default()
        };
        let sigma = parameterize(&g, &cfg, 5).unwrap().joint_covariance().unwrap();
        // each variable is a sum of at most two unit-variance parents with
        // |c| <= 1.5 plus unit noise, and the task sums eight
        for i in 0..sigma.nrows() - 1 {
            assert!(sigma[(i, i)] <= 10.0 + 1e-9, "var {} = {}", i, sigma[(i, i)]);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = parameterize(&demo_graph(), &ScmConfig::default(), 2).unwrap();
        assert_eq!(p.sample(50, 8).unwrap(), p.sample(50, 8).unwrap());
        assert_ne!(p.sample(50, 8).unwrap(), p.sample(50, 9).unwrap());
        assert!(p.sample(0, 8).is_err());
    }

    #[test]
    fn layout_names_round_trip() {
        let p = parameterize(&demo_graph(), &ScmConfig::default(), 2).unwrap();
        let names = p.layout().names();
        assert_eq!(&names[..3], &["s[1].1", "a[1].1", "s[2].1"]);
        assert_eq!(names.last().unwrap(), "g[1].1");
        assert_eq!(&VarLayout::parse_names(&names).unwrap(), p.layout());
        assert!(VarLayout::parse_names(&["s[1].2"]).is_err());
    }

    #[test]
    fn identity_observation_is_noop() {
        let p = parameterize(&demo_graph(), &ScmConfig::default(), 2).unwrap();
        let data = p.sample(20, 1).unwrap();
        let id = ObservationMap::identity(10, 1);
        assert_eq!(id.apply_dataset(&data).unwrap(), data);
    }

    #[test]
    fn observe_requires_square_maps() {
        let p = parameterize(&demo_graph(), &ScmConfig::default(), 2).unwrap();
        let data = p.sample(20, 1).unwrap();
        assert!(observe(&data, 2, 0).is_err());
        let (obs, map) = observe(&data, 1, 0).unwrap();
        assert_eq!(obs.n(), 20);
        let a = map.step(3).unwrap()[(0, 0)];
        let c = p.layout().column(&NodeId::state(3), 1).unwrap();
        assert_relative_eq!(obs.samples()[(4, c)], a * data.samples()[(4, c)]);
    }

    #[test]
    fn random_maps_are_well_conditioned() {
        let map = ObservationMap::random(6, 3, 3, 17).unwrap();
        for t in 1..=6 {
            let sv = map.step(t).unwrap().singular_values();
            assert!(sv.max() / sv.min() <= MAX_COND);
        }
    }
}

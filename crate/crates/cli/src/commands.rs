use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use taskstruct::ci::{ci_query, Backend, CiContext, CiQuery, CovarianceSource};
use taskstruct::discovery::{
    discover_structure, discover_with_representatives, mismatched_cells, DiscoveryOptions, DiscoveryResult, RepRule,
};
use taskstruct::graph::{random_graph, ConditioningSet, NodeId, RandomGraphConfig, TemporalGraph};
use taskstruct::ident::{
    check_span_condition, evaluate_r2, make_instance, rotation_instance, sparse_unmix, IdentInstance, InstanceSpec,
    SpanRow, TaskR2, UnmixConfig, UnmixResult,
};
use taskstruct::io::{
    read_dataset_file, read_json, write_dataset_file, write_json, write_sweep, DatasetMeta, GraphSpec, ObservationMeta,
};
use taskstruct::metrics::{confusion, run_sweep, tasks_for_steps, SweepConfig};
use taskstruct::scm::{observe, parameterize, Dims, ObservationMap, ScmConfig};
use taskstruct::Error;

use crate::{CiArgs, DiscoverArgs, EvalArgs, GenArgs, GraphSource, IdentArgs, SweepArgs};

pub enum CliError {
    /// Bad flags, specs or inputs; exit code 2.
    Config(String),
    /// Failure while running; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let missing_file = matches!(&e, Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound);
        if e.is_config() || missing_file {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn config<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Config(msg.into()))
}

fn load_graph(source: &GraphSource, seed: u64) -> CliResult<(TemporalGraph, Option<u64>)> {
    if let Some(path) = &source.graph {
        let spec: GraphSpec = read_json(path)?;
        let seed = spec.seed;
        return Ok((spec.to_graph()?, seed));
    }
    let (Some(steps), Some(seg_len), Some(n_tasks)) = (source.steps, source.seg_len, source.tasks) else {
        return config("a graph needs --graph FILE or all of -T, -L and -M");
    };
    let cfg = RandomGraphConfig {
        disconnect_frac: source.disconnect_frac,
        relevance_prob: source.relevance_prob,
        ..RandomGraphConfig::new(steps, seg_len, n_tasks)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((random_graph(&cfg, &mut rng)?, Some(seed)))
}

pub fn gen(a: GenArgs) -> CliResult {
    let (graph, graph_seed) = load_graph(&a.graph, a.seed)?;
    let scm = ScmConfig {
        dims: Dims {
            state: a.state_dim,
            action: a.action_dim,
            task: a.task_dim,
        },
        coeff_min: a.coeff_min,
        coeff_max: a.coeff_max,
        noise_std: a.noise_std,
        standardize_parents: a.standardize_parents,
    };
    let params_seed = a.params_seed.unwrap_or(a.seed.wrapping_add(1));
    let sample_seed = a.sample_seed.unwrap_or(a.seed.wrapping_add(2));
    let params = parameterize(&graph, &scm, params_seed)?;
    let mut data = params.sample(a.n, sample_seed)?;
    let observation = match a.observe_seed {
        Some(mixing_seed) => {
            data = observe(&data, a.state_dim, mixing_seed)?.0;
            Some(ObservationMeta {
                obs_dim: a.state_dim,
                mixing_seed,
            })
        }
        None => None,
    };
    write_dataset_file(&a.data, &data)?;
    let meta = DatasetMeta {
        graph: GraphSpec::from_graph(&graph, graph_seed),
        scm,
        params_seed,
        sample_seed,
        n: a.n,
        observation,
    };
    write_json(&a.meta, &meta)?;
    println!(
        "wrote {} samples x {} columns to {} and metadata to {}",
        data.n(),
        data.layout().width(),
        a.data.display(),
        a.meta.display()
    );
    println!("true incidence (segments x tasks):\n{}", graph.incidence());
    Ok(())
}

fn read_meta(path: Option<&Path>) -> CliResult<Option<DatasetMeta>> {
    Ok(path.map(read_json::<DatasetMeta>).transpose()?)
}

/// Graph from `--graph`, else from the metadata.
fn truth_graph(graph: Option<&Path>, meta: Option<&DatasetMeta>) -> CliResult<Option<TemporalGraph>> {
    if let Some(path) = graph {
        return Ok(Some(read_json::<GraphSpec>(path)?.to_graph()?));
    }
    Ok(meta.map(|m| m.graph.to_graph()).transpose()?)
}

/// Population covariance of the (possibly observed) variables described by
/// the metadata.
fn analytic_source(graph: &TemporalGraph, meta: &DatasetMeta) -> CliResult<CovarianceSource> {
    let params = parameterize(graph, &meta.scm, meta.params_seed)?;
    let mut cov = params.joint_covariance()?;
    if let Some(obs) = meta.observation {
        let map = ObservationMap::random(graph.steps(), meta.scm.dims.state, obs.obs_dim, obs.mixing_seed)?;
        cov = map.apply_covariance(params.layout(), &cov)?;
    }
    Ok(CovarianceSource::new(params.layout().clone(), cov)?)
}

fn build_context(
    backend: Backend,
    graph: Option<&TemporalGraph>,
    data: Option<&Path>,
    meta: Option<&DatasetMeta>,
) -> CliResult<CiContext> {
    let ctx = CiContext::new();
    Ok(match backend {
        Backend::GraphOracle => {
            let Some(g) = graph else {
                return config("the graph-oracle backend needs --graph or --meta");
            };
            ctx.with_graph(g.clone())
        }
        Backend::AnalyticCorr => {
            let (Some(g), Some(m)) = (graph, meta) else {
                return config("the analytic-corr backend needs --meta");
            };
            ctx.with_covariance(analytic_source(g, m)?)
        }
        Backend::FisherZ => {
            let Some(path) = data else {
                return config("the fisher-z backend needs --data");
            };
            ctx.with_dataset(&read_dataset_file(path)?)
        }
    })
}

fn parse_reps(s: &str) -> CliResult<RepRule> {
    let bad = || CliError::Config(format!("bad representative rule '{s}' (right-boundary, middle, offset:K, random:SEED)"));
    match s.split_once(':') {
        None if s == "right-boundary" => Ok(RepRule::RightBoundary),
        None if s == "middle" => Ok(RepRule::Middle),
        Some(("offset", k)) => Ok(RepRule::Offset(k.parse().map_err(|_| bad())?)),
        Some(("random", seed)) => Ok(RepRule::Random {
            seed: seed.parse().map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

fn print_scores(res: &DiscoveryResult, truth: &TemporalGraph) -> CliResult {
    let c = confusion(&res.incidence_est, truth.incidence())?;
    println!(
        "accuracy {:.4}  mcc {:.4}  (tp {} tn {} fp {} fn {})",
        c.accuracy(),
        c.mcc(),
        c.tp,
        c.tn,
        c.fp,
        c.fn_
    );
    let wrong = mismatched_cells(&res.incidence_est, truth.incidence());
    if !wrong.is_empty() {
        let cells: Vec<String> = wrong.iter().map(|(k, i)| format!("({k},{i})")).collect();
        println!("mismatched cells (segment, task): {}", cells.join(" "));
    }
    Ok(())
}

pub fn discover(a: DiscoverArgs) -> CliResult {
    let meta = read_meta(a.meta.as_deref())?;
    let Some(graph) = truth_graph(a.graph.as_deref(), meta.as_ref())? else {
        return config("discover needs --graph or --meta for T, L and M");
    };
    let ctx = build_context(a.backend, Some(&graph), a.data.as_deref(), meta.as_ref())?;
    let opts = DiscoveryOptions {
        backend: a.backend,
        alpha: a.alpha,
        bonferroni: a.bonferroni,
    };
    let (steps, seg_len, n_tasks) = (graph.steps(), graph.seg_len(), graph.n_tasks());
    let res = match a.reps.as_deref() {
        None => discover_structure(&ctx, steps, seg_len, n_tasks, &opts)?,
        Some(rule) => discover_with_representatives(&ctx, steps, seg_len, n_tasks, &opts, parse_reps(rule)?)?,
    };
    write_json(&a.out, &res)?;
    println!("estimated incidence (segments x tasks):\n{}", res.incidence_est);
    print_scores(&res, &graph)?;
    println!("{} queries; result written to {}", res.log.len(), a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult {
    let res: DiscoveryResult = read_json(&a.result)?;
    let meta = read_meta(a.meta.as_deref())?;
    let Some(graph) = truth_graph(a.graph.as_deref(), meta.as_ref())? else {
        return config("eval needs --graph or --meta for the true incidence");
    };
    print_scores(&res, &graph)
}

fn parse_supports(s: &str) -> CliResult<Vec<BTreeSet<usize>>> {
    s.split(';')
        .map(|group| {
            group
                .split(',')
                .map(|j| {
                    j.trim()
                        .parse::<usize>()
                        .map_err(|_| CliError::Config(format!("bad support index '{j}' in '{s}'")))
                })
                .collect()
        })
        .collect()
}

#[derive(Serialize)]
struct IdentReport<'a> {
    instance: &'a IdentInstance,
    config: UnmixConfig,
    result: &'a UnmixResult,
    success: bool,
    r2: &'a [TaskR2],
}

#[derive(Serialize)]
struct SpanReport<'a> {
    instance: &'a IdentInstance,
    sample_count: usize,
    rows: &'a [SpanRow],
}

pub fn ident(a: IdentArgs) -> CliResult {
    let (inst, seed) = if let Some(path) = &a.spec {
        let spec: InstanceSpec = read_json(path)?;
        (spec.build()?, a.seed.unwrap_or(spec.seed))
    } else if a.rotation_demo {
        let seed = a.seed.unwrap_or(0);
        (rotation_instance(seed)?, seed)
    } else if let (Some(d), Some(sup)) = (a.d_s, a.supports.as_deref()) {
        let Some(seed) = a.seed else {
            return config("ident with --d-s needs --seed");
        };
        (make_instance(d, &parse_supports(sup)?, seed)?, seed)
    } else {
        return config("ident needs --spec FILE, --rotation-demo, or --d-s with --supports");
    };

    if a.span_only {
        let largest = inst.supports.iter().map(BTreeSet::len).max().unwrap_or(1);
        let count = a.sample_count.unwrap_or(10 * largest);
        let rows = check_span_condition(&inst, count, seed)?;
        for (i, row) in rows.iter().enumerate() {
            println!(
                "task {} (I = {:?}): span condition {} ({} witnesses)",
                i + 1,
                inst.supports[i],
                if row.holds { "holds" } else { "fails" },
                row.witnesses.len()
            );
        }
        write_json(&a.out, &SpanReport { instance: &inst, sample_count: count, rows: &rows })?;
        return Ok(());
    }

    let cfg = UnmixConfig {
        n_points: a.n_points,
        lambda: a.lambda,
        mu: a.mu,
        iters: a.iters,
        step: a.step,
        seed,
        restarts: a.restarts,
        l0_descent: !a.no_l0_descent,
    };
    let result = sparse_unmix(&inst, &cfg)?;
    let r2 = evaluate_r2(&inst, &result, a.eval_samples, seed.wrapping_add(1))?;
    for (i, t) in r2.iter().enumerate() {
        println!(
            "task {} (I = {:?}): block {}  r2_relevant {:.4}  r2_irrelevant {:.4}",
            t.task,
            inst.supports[i],
            if result.block_verdict[i] { "ok" } else { "MIXED" },
            t.r2_relevant,
            t.r2_irrelevant
        );
    }
    println!(
        "off_block_max {:.3e}  l0 counts {:?} (truth {:?})  permutation {:?}",
        result.off_block_max, result.l0_counts, result.l0_truth, result.permutation
    );
    println!(
        "verdict: {}",
        if result.success() { "disentangled" } else { "not disentangled" }
    );
    write_json(
        &a.out,
        &IdentReport {
            instance: &inst,
            config: cfg,
            result: &result,
            success: result.success(),
            r2: &r2,
        },
    )?;
    Ok(())
}

pub fn sweep(a: SweepArgs) -> CliResult {
    let mut cfg: SweepConfig = match &a.config {
        Some(path) => read_json(path)?,
        None => SweepConfig::default(),
    };
    if let Some(b) = a.backend {
        cfg.backend = b;
    }
    if let Some(steps) = &a.steps {
        cfg.grid = steps.iter().map(|&t| (t, tasks_for_steps(t))).collect();
    }
    if let (Some(tasks), Some(t)) = (&a.tasks, a.at_steps) {
        cfg.grid = tasks.iter().map(|&m| (t, m)).collect();
    }
    if let Some(grid) = &a.grid {
        cfg.grid = grid.clone();
    }
    if let Some(seeds) = &a.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(runs) = a.runs {
        cfg.seeds = (0..runs).collect();
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(alpha) = a.alpha {
        cfg.alpha = alpha;
    }
    if let Some(b) = a.bonferroni {
        cfg.bonferroni = b;
    }
    if let Some(f) = a.disconnect_frac {
        cfg.disconnect_frac = f;
    }
    if let Some(l) = a.seg_len {
        cfg.seg_len = l;
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return config(format!("alpha must lie in (0, 1), got {}", cfg.alpha));
    }
    let records = run_sweep(&cfg)?;
    let file = File::create(&a.out).map_err(|e| CliError::Runtime(format!("{}: {e}", a.out.display())))?;
    write_sweep(BufWriter::new(file), &records)?;
    if a.progress {
        for r in &records {
            println!(
                "{} T={} L={} M={} seed={} accuracy={:.4} mcc={:.4} ({:.2} s)",
                r.method, r.steps, r.seg_len, r.n_tasks, r.seed, r.accuracy, r.mcc, r.runtime_s
            );
        }
    }
    for &(t, m) in &cfg.grid {
        let cell: Vec<_> = records.iter().filter(|r| r.steps == t && r.n_tasks == m).collect();
        if cell.is_empty() {
            continue;
        }
        let n = cell.len() as f64;
        println!(
            "T={t} M={m}: mean accuracy {:.4}  mean mcc {:.4}  over {} seeds",
            cell.iter().map(|r| r.accuracy).sum::<f64>() / n,
            cell.iter().map(|r| r.mcc).sum::<f64>() / n,
            cell.len()
        );
    }
    println!("{} records written to {}", records.len(), a.out.display());
    Ok(())
}

fn parse_node(s: &str) -> CliResult<NodeId> {
    Ok(s.parse()?)
}

pub fn ci(a: CiArgs) -> CliResult {
    let meta = read_meta(a.meta.as_deref())?;
    let graph = truth_graph(a.graph.as_deref(), meta.as_ref())?;
    let ctx = build_context(a.backend, graph.as_ref(), a.data.as_deref(), meta.as_ref())?;
    let (x, y, z) = if let Some(band) = &a.band {
        let Some(g) = &graph else {
            return config("--band needs --graph or --meta for L and T");
        };
        let &[k, v, i] = band.as_slice() else {
            return config(format!("--band takes exactly three values k,v,i, got {}", band.len()));
        };
        let z = g.band_set(k, v, i)?;
        (NodeId::state(k * g.seg_len()), NodeId::state(v * g.seg_len()), z)
    } else if let (Some(x), Some(y)) = (&a.x, &a.y) {
        let z = ConditioningSet::new(a.given.iter().map(|s| parse_node(s)).collect::<CliResult<Vec<_>>>()?)?;
        (parse_node(x)?, parse_node(y)?, z)
    } else {
        return config("ci needs --x and --y, or --band k,v,i");
    };
    let res = ci_query(&CiQuery::new(x, y, z.clone(), a.backend, a.alpha), &ctx)?;
    let p = res.p_value.map_or("n/a".to_string(), |p| format!("{p:.6e}"));
    println!(
        "{x} vs {y} given {z}: statistic {:.6}  p {p}  verdict {}",
        res.statistic,
        if res.dependent { "dependent" } else { "independent" }
    );
    Ok(())
}

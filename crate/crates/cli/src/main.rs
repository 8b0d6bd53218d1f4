mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use taskstruct::ci::Backend;

#[derive(Debug, Parser)]
#[command(name = "taskstruct", version, about = "Temporal task-structure discovery and latent identifiability experiments")]
struct Cli {
    /// Worker threads for parallel queries and sweeps (default: all cores).
    #[arg(long, global = true, env = "TASKSTRUCT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a graph, parameterize the SCM and write samples plus metadata.
    Gen(GenArgs),
    /// Recover the segment-task incidence with band-set CI queries.
    Discover(DiscoverArgs),
    /// Run a sparse unmixing experiment on a task-Jacobian instance.
    Ident(IdentArgs),
    /// Run a discovery sweep and write the records table.
    Sweep(SweepArgs),
    /// Score a discovery result against the true incidence.
    Eval(EvalArgs),
    /// Run a single CI query.
    Ci(CiArgs),
}

#[derive(Debug, Args)]
struct GraphSource {
    /// Graph spec file (JSON with T, L, M, incidence, disconnected_boundaries).
    #[arg(long, conflicts_with_all = ["steps", "seg_len", "tasks"])]
    graph: Option<PathBuf>,
    /// Number of time steps T for a random graph.
    #[arg(short = 'T', long)]
    steps: Option<usize>,
    /// Segment length L.
    #[arg(short = 'L', long)]
    seg_len: Option<usize>,
    /// Number of tasks M.
    #[arg(short = 'M', long)]
    tasks: Option<usize>,
    /// Fraction of segment boundaries to cut in a random graph.
    #[arg(long, default_value_t = 0.2)]
    disconnect_frac: f64,
    /// Probability that a task is relevant to a segment in a random graph.
    #[arg(long, default_value_t = 0.5)]
    relevance_prob: f64,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    graph: GraphSource,
    /// Seed for the random graph; parameter and sample seeds derive from it.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    params_seed: Option<u64>,
    #[arg(long)]
    sample_seed: Option<u64>,
    /// Number of samples.
    #[arg(short, long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    state_dim: usize,
    #[arg(long, default_value_t = 1)]
    action_dim: usize,
    #[arg(long, default_value_t = 1)]
    task_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    coeff_min: f64,
    #[arg(long, default_value_t = 1.5)]
    coeff_max: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_std: f64,
    /// Scale coefficients by the inverse marginal std of each parent.
    #[arg(long)]
    standardize_parents: bool,
    /// Replace each state block by a random invertible mix with this seed.
    #[arg(long)]
    observe_seed: Option<u64>,
    /// Dataset file (CSV).
    #[arg(long, default_value = "data.csv")]
    data: PathBuf,
    /// Metadata file (JSON).
    #[arg(long, default_value = "meta.json")]
    meta: PathBuf,
}

#[derive(Debug, Args)]
struct DiscoverArgs {
    #[arg(long, default_value = "fisher-z", value_parser = parse_backend)]
    backend: Backend,
    /// Graph spec file, for the oracle backend.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Dataset file, for the Fisher z backend.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Metadata file written by `gen`.
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Divide alpha by the number of queries.
    #[arg(long)]
    bonferroni: bool,
    /// Representative rule: right-boundary, middle, offset:K or random:SEED.
    #[arg(long)]
    reps: Option<String>,
    /// Result file (JSON).
    #[arg(long, default_value = "result.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct IdentArgs {
    /// Instance spec file (JSON with d_s, supports, seed).
    #[arg(long, conflicts_with_all = ["d_s", "supports", "rotation_demo"])]
    spec: Option<PathBuf>,
    /// Latent dimension.
    #[arg(long, requires = "supports")]
    d_s: Option<usize>,
    /// Task supports, 1-based, e.g. "1,2;3".
    #[arg(long, requires = "d_s")]
    supports: Option<String>,
    /// Two singleton tasks observed through a 45 degree rotation.
    #[arg(long)]
    rotation_demo: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 512)]
    n_points: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    mu: f64,
    #[arg(long, default_value_t = 5000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-2)]
    step: f64,
    /// Extra random-rotation starts.
    #[arg(long, default_value_t = 0)]
    restarts: usize,
    /// Skip the greedy l0 descent after the l1 stage.
    #[arg(long)]
    no_l0_descent: bool,
    /// Samples for the R^2 evaluation.
    #[arg(long, default_value_t = 10_000)]
    eval_samples: usize,
    /// Only check the span condition.
    #[arg(long)]
    span_only: bool,
    /// Sample points for the span check (default: 10 x largest support).
    #[arg(long)]
    sample_count: Option<usize>,
    /// Result file (JSON).
    #[arg(long, default_value = "ident.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Sweep config file (JSON); flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_backend)]
    backend: Option<Backend>,
    /// T values, with M = max(2, round(T/5)), e.g. "8,10,12".
    #[arg(long, value_delimiter = ',', conflicts_with = "grid")]
    steps: Option<Vec<usize>>,
    /// M values at the fixed T given by --at-steps.
    #[arg(long, value_delimiter = ',', requires = "at_steps", conflicts_with_all = ["steps", "grid"])]
    tasks: Option<Vec<usize>>,
    #[arg(long)]
    at_steps: Option<usize>,
    /// Explicit cells "T:M", e.g. "10:2,20:4".
    #[arg(long, value_delimiter = ',', value_parser = parse_cell)]
    grid: Option<Vec<(usize, usize)>>,
    /// Seeds, e.g. "0,1,2".
    #[arg(long, value_delimiter = ',', conflicts_with = "runs")]
    seeds: Option<Vec<u64>>,
    /// Shorthand for seeds 0..runs.
    #[arg(long)]
    runs: Option<u64>,
    #[arg(short, long)]
    n: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    bonferroni: Option<bool>,
    #[arg(long)]
    disconnect_frac: Option<f64>,
    #[arg(long)]
    seg_len: Option<usize>,
    /// Records table (CSV).
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
    /// Print one line per record.
    #[arg(long)]
    progress: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Discovery result file.
    #[arg(long)]
    result: PathBuf,
    /// Graph spec holding the true incidence.
    #[arg(long, conflicts_with = "meta")]
    graph: Option<PathBuf>,
    /// Metadata file written by `gen`.
    #[arg(long)]
    meta: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CiArgs {
    #[arg(long, default_value = "fisher-z", value_parser = parse_backend)]
    backend: Backend,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    meta: Option<PathBuf>,
    /// First variable, e.g. "s[4]".
    #[arg(long, requires = "y", conflicts_with = "band")]
    x: Option<String>,
    #[arg(long, requires = "x")]
    y: Option<String>,
    /// Conditioning set, e.g. "s[3],s[5],g[1]".
    #[arg(long, value_delimiter = ',')]
    given: Vec<String>,
    /// Band query "k,v,i" on s[kL] and s[vL].
    #[arg(long, value_delimiter = ',')]
    band: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    s.parse().map_err(|e: taskstruct::Error| e.to_string())
}

fn parse_cell(s: &str) -> Result<(usize, usize), String> {
    let (t, m) = s.split_once(':').ok_or_else(|| format!("expected T:M, got '{s}'"))?;
    let t = t.trim().parse().map_err(|_| format!("bad T in '{s}'"))?;
    let m = m.trim().parse().map_err(|_| format!("bad M in '{s}'"))?;
    Ok((t, m))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Discover(a) => commands::discover(a),
        Command::Ident(a) => commands::ident(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ci(a) => commands::ci(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

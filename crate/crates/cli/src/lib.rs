//! `entot` command-line tool.
//!
//! Subcommands `solve`, `entropy`, `rate`, `clt` and `compare` read a point
//! set or an experiment config, write their tables into `--out`, and finish
//! with a `manifest.json` describing the run. Every file is written to a
//! temporary name first and renamed into place.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 numeric failure,
//! 4 solver non-convergence under `--strict`, 1 output I/O failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use entot::experiments::{
    compare_entropy_estimators, entropy_rep, reference_value, run_clt_experiment,
    run_rate_experiment, write_compare_csv, write_fluctuations_csv, write_histogram_csv,
    write_rate_csv, write_rate_summary_csv, ExperimentConfig,
};
use entot::sinkhorn::{solve, CostSpec, SolverSettings};
use serde::Serialize;
use serde_json::{json, Value};

pub mod pointset;

pub const THREADS_ENV: &str = "ENTOT_THREADS";
const BUILD_ID: &str = env!("ENTOT_BUILD_ID");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("solver did not converge: {0}")]
    NotConverged(String),
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 2,
            Self::Numeric(_) => 3,
            Self::NotConverged(_) => 4,
            Self::Output(_) => 1,
        }
    }
}

impl From<entot::Error> for CliError {
    fn from(e: entot::Error) -> Self {
        match e {
            entot::Error::NumericFailure(m) => Self::Numeric(m),
            other => Self::Config(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "entot",
    version,
    about = "Entropic optimal transport and noisy entropy estimation"
)]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve one transport problem between two point-set files.
    Solve(SolveArgs),
    /// Run one entropy estimator on the largest sample size of a config.
    Entropy(ConfigArgs),
    /// Mean absolute error against the reference for every sample size.
    Rate(ConfigArgs),
    /// Fluctuations of the estimate at the largest sample size.
    Clt(ConfigArgs),
    /// All three entropy estimators on shared samples.
    Compare(ConfigArgs),
}

#[derive(Args, Debug, Serialize)]
struct SolveArgs {
    #[arg(long)]
    p: PathBuf,
    #[arg(long)]
    q: PathBuf,
    #[arg(long)]
    eps: f64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iter: usize,
    #[arg(long)]
    out: PathBuf,
    /// Exit with code 4 if the solver does not converge.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug, Serialize)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `root_seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Exit with code 4 if any solve does not converge.
    #[arg(long)]
    strict: bool,
}

/// Provenance written next to every output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub tool_version: String,
    pub build: String,
    pub root_seed: Option<u64>,
    pub threads: usize,
    pub duration_seconds: f64,
    pub outputs: Vec<String>,
    pub summary: Value,
}

/// Parses `ENTOT_THREADS`; unset means the rayon default.
pub fn threads_from_env(value: Option<&str>) -> Result<Option<usize>, CliError> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Output(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, contents)
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Output(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.dir.join(name), contents)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut text =
            serde_json::to_vec_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
        text.push(b'\n');
        self.write(name, &text)
    }

    fn csv(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut Vec<u8>) -> entot::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write(name, &buf)
    }
}

struct Finished {
    config: Value,
    root_seed: Option<u64>,
    summary: Value,
    unconverged: usize,
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut config = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = args.seed {
        config.root_seed = seed;
    }
    Ok(config)
}

fn config_echo(config: &ExperimentConfig) -> Value {
    serde_json::to_value(config).expect("configs always serialize")
}

fn run_solve(args: &SolveArgs, out: &mut Outputs) -> Result<Finished, CliError> {
    let p = pointset::read_point_set(&args.p)?;
    let q = pointset::read_point_set(&args.q)?;
    let cost = CostSpec::squared_euclidean(args.eps)?;
    let settings = SolverSettings {
        tolerance: args.tol,
        max_iterations: args.max_iter,
        ..SolverSettings::default()
    };
    let sol = solve(&p, &q, &cost, &settings)?;
    out.json(
        "solution.json",
        &json!({
            "value": sol.value,
            "iterations": sol.iterations,
            "marginal_error": sol.marginal_error,
            "converged": sol.converged,
            "epsilon": sol.potentials.epsilon,
            "potentials": {"f": sol.potentials.f, "g": sol.potentials.g},
        }),
    )?;
    Ok(Finished {
        config: serde_json::to_value(args).expect("arguments serialize"),
        root_seed: None,
        summary: json!({"value": sol.value, "converged": sol.converged}),
        unconverged: usize::from(!sol.converged),
    })
}

fn run_entropy(args: &ConfigArgs, out: &mut Outputs) -> Result<Finished, CliError> {
    let config = load_config(args)?;
    let n = *config.n_list.last().expect("validated non-empty");
    let seed = config.rep_seed(n, 0);
    let report = entropy_rep(&config, config.variant, n, seed)?;
    let reference = reference_value(&config)?;
    out.json(
        "report.json",
        &json!({
            "variant": config.variant,
            "seed": seed,
            "reference": reference,
            "report": report,
        }),
    )?;
    Ok(Finished {
        config: config_echo(&config),
        root_seed: Some(config.root_seed),
        summary: json!({"estimate": report.estimate, "std_error": report.std_error}),
        unconverged: usize::from(!report.converged),
    })
}

fn run_rate(args: &ConfigArgs, out: &mut Outputs) -> Result<Finished, CliError> {
    let config = load_config(args)?;
    let result = run_rate_experiment(&config)?;
    out.csv("rate.csv", |w| write_rate_csv(w, &result))?;
    out.csv("summary.csv", |w| write_rate_summary_csv(w, &result))?;
    Ok(Finished {
        config: config_echo(&config),
        root_seed: Some(config.root_seed),
        summary: json!({
            "slope": result.slope,
            "intercept": result.intercept,
            "reference": result.reference,
        }),
        unconverged: result.rows.iter().map(|r| r.non_converged).sum(),
    })
}

fn run_clt(args: &ConfigArgs, out: &mut Outputs) -> Result<Finished, CliError> {
    let config = load_config(args)?;
    let result = run_clt_experiment(&config)?;
    out.csv("fluctuations.csv", |w| write_fluctuations_csv(w, &result))?;
    out.csv("histogram.csv", |w| {
        write_histogram_csv(w, &result.histogram)
    })?;
    let ks = json!({
        "statistic": result.ks.map(|k| k.statistic),
        "p_value": result.ks.map(|k| k.p_value),
        "degenerate": result.degenerate,
        "n": result.n,
        "reps": result.reps.len(),
        "reference_variance": result.reference_variance,
        "empirical_variance": result.empirical_variance,
        "plug_in_variance": result.plug_in_variance,
        "analytic_variance": result.analytic_variance,
    });
    out.json("ks.json", &ks)?;
    Ok(Finished {
        config: config_echo(&config),
        root_seed: Some(config.root_seed),
        summary: ks,
        unconverged: result.reps.iter().filter(|r| !r.converged).count(),
    })
}

fn run_compare(args: &ConfigArgs, out: &mut Outputs) -> Result<Finished, CliError> {
    let config = load_config(args)?;
    let table = compare_entropy_estimators(&config)?;
    out.csv("compare.csv", |w| write_compare_csv(w, &table))?;
    Ok(Finished {
        config: config_echo(&config),
        root_seed: Some(config.root_seed),
        summary: json!({"truth": table.truth, "summary": table.summary}),
        unconverged: table.records.iter().filter(|r| !r.converged).count(),
    })
}

fn dispatch(cli: &Cli, threads: usize) -> Result<(), CliError> {
    let start = Instant::now();
    let (name, out_dir, strict) = match &cli.command {
        Command::Solve(a) => ("solve", &a.out, a.strict),
        Command::Entropy(a) => ("entropy", &a.out, a.strict),
        Command::Rate(a) => ("rate", &a.out, a.strict),
        Command::Clt(a) => ("clt", &a.out, a.strict),
        Command::Compare(a) => ("compare", &a.out, a.strict),
    };
    let mut out = Outputs::new(out_dir)?;
    let done = match &cli.command {
        Command::Solve(a) => run_solve(a, &mut out)?,
        Command::Entropy(a) => run_entropy(a, &mut out)?,
        Command::Rate(a) => run_rate(a, &mut out)?,
        Command::Clt(a) => run_clt(a, &mut out)?,
        Command::Compare(a) => run_compare(a, &mut out)?,
    };
    let mut outputs = out.written.clone();
    outputs.push("manifest.json".to_string());
    let manifest = RunManifest {
        command: name.to_string(),
        config: done.config,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        build: BUILD_ID.to_string(),
        root_seed: done.root_seed,
        threads,
        duration_seconds: start.elapsed().as_secs_f64(),
        outputs,
        summary: done.summary,
    };
    out.json("manifest.json", &manifest)?;
    if strict && done.unconverged > 0 {
        return Err(CliError::NotConverged(format!(
            "{} solve(s) hit the iteration cap",
            done.unconverged
        )));
    }
    Ok(())
}

/// Runs the tool on `argv` (including the program name) and returns the
/// process exit code.
pub fn run_cli<S: AsRef<str>>(argv: &[S]) -> i32 {
    let cli = match Cli::try_parse_from(argv.iter().map(|s| s.as_ref())) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();

    let result = threads_from_env(std::env::var(THREADS_ENV).ok().as_deref()).and_then(|threads| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
        let count = pool.current_num_threads();
        pool.install(|| dispatch(&cli, count))
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("entot: {e}");
            e.exit_code()
        }
    }
}

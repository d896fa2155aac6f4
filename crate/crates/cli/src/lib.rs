//! Command-line front end: `dnf run`, `dnf reference` and `dnf baseline`.
//!
//! Exit status 0 means success, 1 an invalid invocation or configuration
//! (the message names the offending flag or key) and 2 a failure while
//! computing, in which case `run` still writes `trace.json` with a failure
//! record.

pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, CommandFactory, Parser, Subcommand};
use dnf_core::driver::run_dnf_detailed;
use dnf_core::problems::make_problem_with;
use dnf_core::{lhs_baseline, reference_mc, CriterionKind, Problem};

use config::{resolve_out, resolve_problem, EffectiveConfig, RunConfigFile};
use output::*;

/// Adaptive failure-probability estimation with flow-based design of
/// experiments.
#[derive(Debug, Parser)]
#[command(name = "dnf", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the adaptive loop and export trace.json, trace.csv, designs.csv
    /// and optionally grid.csv.
    Run(RunArgs),
    /// Direct Monte Carlo on the true limit state; writes reference.json.
    Reference(ReferenceArgs),
    /// One surrogate on N_max Latin-hypercube points; writes baseline.json.
    Baseline(BaselineArgs),
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Benchmark: four-branch, iso-probability (alias iso) or darcy.
    #[arg(long)]
    pub problem: Option<String>,
    /// TOML file with `problem`, `out`, and [dnf], [darcy], [export] sections.
    /// Flags override its values; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory [default: $DNF_OUT_DIR, else ./dnf-out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Selection rule: nfbd, nfbd-fg or nfbd-ag [default: nfbd-ag].
    #[arg(long)]
    pub criterion: Option<CriterionKind>,
    /// Initial design size N0 [default: 25].
    #[arg(long)]
    pub n0: Option<usize>,
    /// Designs per iteration N_D [default: 2].
    #[arg(long)]
    pub nd: Option<usize>,
    /// Total budget of g-calls N_max [default: 95].
    #[arg(long)]
    pub nmax: Option<usize>,
    /// Separation scale ε0 [default: 2.5% of the smallest box side].
    #[arg(long, allow_negative_numbers = true)]
    pub eps0: Option<f64>,
    /// Relative-change stopping tolerance; 0 disables, inf stops after the
    /// minimum number of iterations [default: 0.1].
    #[arg(long, allow_negative_numbers = true)]
    pub tolerance: Option<f64>,
    /// Surrogate Monte Carlo sample count [default: 100000].
    #[arg(long = "mc-n")]
    pub mc_n: Option<usize>,
    /// Points per axis of the surrogate contour grid; 0 skips grid.csv
    /// [default: 0].
    #[arg(long = "grid-res")]
    pub grid_res: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReferenceArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of direct Monte Carlo samples [default: 100000].
    #[arg(long = "mc-n", alias = "n")]
    pub mc_n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// LHS design size [default: 95 four-branch, 45 iso-probability, 70 darcy].
    #[arg(long)]
    pub nmax: Option<usize>,
    /// Surrogate Monte Carlo sample count [default: 100000].
    #[arg(long = "mc-n")]
    pub mc_n: Option<usize>,
}

/// Why a command failed; selects the exit status.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

type Outcome = Result<(), Failure>;

fn config_err<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Config)
}

fn runtime_err<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let sub = match &cli.command {
        Command::Run(_) => "run",
        Command::Reference(_) => "reference",
        Command::Baseline(_) => "baseline",
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            match &f {
                Failure::Config(e) => {
                    eprintln!("error: {e:#}\n");
                    let mut cmd = Cli::command();
                    cmd.build();
                    if let Some(c) = cmd.find_subcommand_mut(sub) {
                        eprintln!("{}", c.render_usage());
                    }
                    eprintln!("For more information, try '--help'.");
                }
                Failure::Runtime(e) => eprintln!("error: run failed: {e:#}"),
            }
            f.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Outcome {
    match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Reference(a) => cmd_reference(a),
        Command::Baseline(a) => cmd_baseline(a),
    }
}

struct Common {
    file: RunConfigFile,
    problem: Problem,
    out: PathBuf,
    seed: u64,
}

fn prepare(common: &CommonArgs) -> Result<Common, Failure> {
    let file = config_err(RunConfigFile::load_optional(common.config.as_deref()))?;
    let name = config_err(resolve_problem(common.problem.as_deref(), file.problem.as_deref()))?;
    let problem = config_err(make_problem_with(&name, &file.darcy).map_err(|e| anyhow::anyhow!("darcy: {e}")))?;
    let out = resolve_out(common.out.as_deref(), file.out.as_deref());
    config_err(
        std::fs::create_dir_all(&out).with_context(|| format!("out: cannot create output directory {}", out.display())),
    )?;
    let seed = common.seed.unwrap_or(file.dnf.seed);
    Ok(Common { file, problem, out, seed })
}

pub fn cmd_run(args: RunArgs) -> Outcome {
    let Common { file, problem, out, seed } = prepare(&args.common)?;
    let mut dnf = file.dnf.clone();
    dnf.seed = seed;
    if let Some(v) = args.criterion {
        dnf.criterion = v;
    }
    if let Some(v) = args.n0 {
        dnf.n0 = v;
    }
    if let Some(v) = args.nd {
        dnf.n_design = v;
    }
    if let Some(v) = args.nmax {
        dnf.n_max = v;
    }
    if args.eps0.is_some() {
        dnf.eps0 = args.eps0;
    }
    if let Some(v) = args.tolerance {
        dnf.tolerance = v;
    }
    if let Some(v) = args.mc_n {
        dnf.mc_samples = v;
    }
    let mut export = file.export.clone();
    if let Some(v) = args.grid_res {
        export.grid_res = v;
    }
    config_err(dnf.validate().map_err(anyhow::Error::from))?;
    if export.grid_res == 1 {
        return Err(Failure::Config(anyhow::anyhow!("grid_res: need 0 or at least 2 points per axis")));
    }
    let effective = EffectiveConfig {
        problem: problem.name().to_string(),
        out: out.clone(),
        dnf: dnf.clone(),
        darcy: file.darcy.clone(),
        export: export.clone(),
    };

    let outcome = config_err(run_dnf_detailed(&problem, &dnf).map_err(anyhow::Error::from))?;
    let trace_file = TraceFile {
        effective_config: effective,
        trace: outcome.trace,
    };
    runtime_err(write_json(&out.join(TRACE_JSON), &trace_file))?;
    if let Some(e) = outcome.error {
        return Err(Failure::Runtime(anyhow::Error::from(e).context(format!(
            "failure recorded in {}",
            out.join(TRACE_JSON).display()
        ))));
    }
    let trace = &trace_file.trace;
    runtime_err((|| {
        if export.trace_csv {
            write_trace_csv(&out.join(TRACE_CSV), trace)?;
        }
        if export.designs {
            write_designs_csv(&out.join(DESIGNS_CSV), problem.dim(), &design_rows(trace))?;
        }
        if export.grid_res >= 2 {
            let surrogate = outcome.surrogate.as_ref().context("run finished without a surrogate")?;
            let rows = surrogate_grid(surrogate, problem.domain(), export.grid_res)?;
            write_grid_csv(&out.join(GRID_CSV), &rows)?;
        }
        Ok(())
    })())?;
    let p = trace.final_estimate.unwrap_or(f64::NAN);
    println!(
        "{} {}: p_hat = {p:e} after {} g-calls ({:?}); results in {}",
        problem.name(),
        dnf.criterion,
        trace.total_calls,
        trace.stop_reason.expect("finished run has a stop reason"),
        out.display()
    );
    Ok(())
}

pub fn cmd_reference(args: ReferenceArgs) -> Outcome {
    let Common { problem, out, seed, .. } = prepare(&args.common)?;
    let n = args.mc_n.unwrap_or(100_000);
    if n == 0 {
        return Err(Failure::Config(anyhow::anyhow!("mc-n: must be positive")));
    }
    let result = runtime_err(reference_mc(&problem, n, seed).map_err(anyhow::Error::from))?;
    let file = ReferenceFile {
        problem: problem.name().to_string(),
        samples: n,
        seed,
        g_calls: problem.calls(),
        result,
    };
    runtime_err(write_json(&out.join(REFERENCE_JSON), &file))?;
    println!(
        "{} reference: p = {:e} ± {:e} (n = {n})",
        problem.name(),
        result.estimate,
        result.std_error
    );
    Ok(())
}

/// Standard budgets of the benchmark setups.
pub fn default_budget(problem: &str) -> usize {
    match problem {
        "iso-probability" => 45,
        "darcy" => 70,
        _ => 95,
    }
}

pub fn cmd_baseline(args: BaselineArgs) -> Outcome {
    let Common { file, problem, out, seed } = prepare(&args.common)?;
    let n_max = args.nmax.unwrap_or_else(|| default_budget(problem.name()));
    let n_mc = args.mc_n.unwrap_or(file.dnf.mc_samples);
    if n_max < 2 {
        return Err(Failure::Config(anyhow::anyhow!("nmax: need at least 2 points, got {n_max}")));
    }
    if n_mc == 0 {
        return Err(Failure::Config(anyhow::anyhow!("mc-n: must be positive")));
    }
    config_err(file.dnf.surrogate.validate().map_err(anyhow::Error::from))?;
    let result = runtime_err(lhs_baseline(&problem, n_max, n_mc, seed, &file.dnf.surrogate).map_err(anyhow::Error::from))?;
    let record = BaselineFile {
        problem: problem.name().to_string(),
        n_max,
        mc_samples: n_mc,
        seed,
        g_calls: problem.calls(),
        result,
    };
    runtime_err(write_json(&out.join(BASELINE_JSON), &record))?;
    println!(
        "{} LHS baseline with {n_max} points: p_hat = {:e}",
        problem.name(),
        result.estimate
    );
    Ok(())
}

/// Reads `trace.json` from an output directory.
pub fn load_trace_file(dir: &Path) -> anyhow::Result<TraceFile> {
    read_json(&dir.join(TRACE_JSON))
}

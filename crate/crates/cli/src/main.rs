use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use expertmix::harness::verify::run_suite;
use expertmix::harness::{
    emit_csv, read_csv, recompute_bounds, run_experiment, write_csv, ConfigBuilder, ExperimentConfig, RunSummary,
};
use expertmix::{Error, TransitionKernel};

#[derive(Parser)]
#[command(name = "expertmix", version, about = "Adaptive expert mixing over competition classes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its per-round CSV.
    Run(RunArgs),
    /// Run a grid of seeds and parameters in parallel.
    Sweep(SweepArgs),
    /// Check the engine against the brute-force oracles.
    Verify(VerifyArgs),
    /// Recompute regret bounds from a report CSV.
    Bounds(BoundsArgs),
}

/// Experiment settings. Flags override values from `--config`.
#[derive(Args, Clone, Default)]
struct ExperimentArgs {
    /// Flat `key = value` file with any of the settings below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    experts: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    /// fixed, cyclic or switching.
    #[arg(long)]
    kernel: Option<String>,
    /// Kernel parameter as name=value, e.g. switch-weight=0.05. Repeatable.
    #[arg(long = "kernel-param", value_name = "K=V")]
    kernel_param: Vec<String>,
    /// `auto` or a positive number.
    #[arg(long)]
    gamma: Option<String>,
    /// iid-uniform, gaussian-drift, adversarial-cyclic, adversarial-switching or constant.
    #[arg(long = "loss-gen")]
    loss_gen: Option<String>,
    /// Generator parameter as name=value. Repeatable.
    #[arg(long = "loss-param", value_name = "K=V")]
    loss_param: Vec<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Append `d`, `choice` and per-expert probabilities to the CSV.
    #[arg(long = "debug-probs")]
    debug_probs: bool,
    /// Multiply every loss by this factor.
    #[arg(long = "transform-scale")]
    transform_scale: Option<String>,
    /// Add a per-round offset drawn from U[-x, x] before scaling.
    #[arg(long = "transform-shift")]
    transform_shift: Option<String>,
}

impl ExperimentArgs {
    fn builder(&self) -> Result<ConfigBuilder> {
        let mut b = match &self.config {
            Some(path) => ConfigBuilder::from_file(path)?,
            None => ConfigBuilder::new(),
        };
        let scalars = [
            ("experts", &self.experts),
            ("rounds", &self.rounds),
            ("kernel", &self.kernel),
            ("gamma", &self.gamma),
            ("loss-gen", &self.loss_gen),
            ("seed", &self.seed),
            ("transform-scale", &self.transform_scale),
            ("transform-shift", &self.transform_shift),
        ];
        for (key, value) in scalars {
            if let Some(v) = value {
                b.set(key, v)?;
            }
        }
        for p in &self.kernel_param {
            b.set("kernel-param", p)?;
        }
        for p in &self.loss_param {
            b.set("loss-param", p)?;
        }
        if self.debug_probs {
            b.set("debug-probs", "true")?;
        }
        Ok(b)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Seed range `a..b` (exclusive end) or a comma-separated list.
    #[arg(long, default_value = "0..10")]
    seeds: String,
    /// Grid axis as key=v1,v2,... over any config key. Repeatable.
    #[arg(long = "grid", value_name = "KEY=V1,V2")]
    grid: Vec<String>,
    /// Directory for per-run CSVs and summary.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per check.
    #[arg(long, default_value_t = 100)]
    cases: usize,
}

#[derive(Args)]
struct BoundsArgs {
    /// Report CSV written by `run` or `sweep`.
    csv: PathBuf,
    /// Class budget W_T. When absent it is taken from the kernel.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long, default_value = "cyclic")]
    kernel: String,
    #[arg(long = "kernel-param", value_name = "K=V")]
    kernel_param: Vec<String>,
    #[arg(long)]
    experts: Option<usize>,
    /// Horizon for the kernel budget; defaults to the number of CSV rows.
    #[arg(long)]
    rounds: Option<usize>,
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = spec.split_once("..") {
        let a: u64 = a.trim().parse().with_context(|| format!("bad seed range '{spec}'"))?;
        let b: u64 = b.trim().parse().with_context(|| format!("bad seed range '{spec}'"))?;
        if b <= a {
            bail!("empty seed range '{spec}'");
        }
        return Ok((a..b).collect());
    }
    spec.split(',')
        .map(|s| s.trim().parse().with_context(|| format!("bad seed '{s}'")))
        .collect()
}

/// Cartesian product of the grid axes as lists of (key, value) settings.
fn expand_grid(axes: &[String]) -> Result<Vec<Vec<(String, String)>>> {
    let mut points = vec![Vec::new()];
    for axis in axes {
        let (key, values) = axis
            .split_once('=')
            .with_context(|| format!("grid axis '{axis}' is not KEY=V1,V2"))?;
        let mut next = Vec::new();
        for p in &points {
            for v in values.split(',') {
                let mut q: Vec<(String, String)> = p.clone();
                q.push((key.trim().to_string(), v.trim().to_string()));
                next.push(q);
            }
        }
        points = next;
    }
    Ok(points)
}

fn label(point: &[(String, String)]) -> String {
    point
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn file_stem(point: &[(String, String)], seed: u64) -> String {
    let mut stem: String = label(point)
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    if !stem.is_empty() {
        stem.push('_');
    }
    format!("{stem}seed{seed}")
}

fn run(args: RunArgs) -> Result<()> {
    let config = args.experiment.builder()?.build()?;
    let report = run_experiment(&config)?;
    let out = args.out.or(config.out.clone());
    match &out {
        Some(path) => emit_csv(&report, path)?,
        None => write_csv(&report, io::stdout().lock())?,
    }
    let last = report.last();
    eprintln!(
        "{} kernel, M={}, T={}, gamma={:.6}: regret {:.6}, bound_var {:.6}, bound_range {:.6}",
        report.kernel,
        report.experts,
        report.rows.len(),
        report.gamma,
        last.exp_regret,
        last.bound_var,
        last.bound_range
    );
    Ok(())
}

/// One sweep member: its grid point, seed and resolved config.
type Job = (Vec<(String, String)>, u64, ExperimentConfig);

fn sweep(args: SweepArgs) -> Result<()> {
    let seeds = parse_seeds(&args.seeds)?;
    let points = expand_grid(&args.grid)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut jobs: Vec<Job> = Vec::new();
    for point in &points {
        for &seed in &seeds {
            let mut b = args.experiment.builder()?;
            for (k, v) in point {
                b.set(k, v)?;
            }
            b.set("seed", &seed.to_string())?;
            jobs.push((point.clone(), seed, b.build()?));
        }
    }

    let results: Vec<Result<(String, RunSummary)>> = jobs
        .par_iter()
        .map(|(point, seed, config)| {
            let report = run_experiment(config)?;
            let path = args.out.join(format!("{}.csv", file_stem(point, *seed)));
            emit_csv(&report, &path)?;
            Ok((label(point), RunSummary::from_report(*seed, &report)))
        })
        .collect();

    let summary_path = args.out.join("summary.csv");
    let mut lines = vec![format!("params,{}", RunSummary::HEADER.join(","))];
    let mut first_error = None;
    for r in results {
        match r {
            Ok((params, s)) => lines.push(format!(
                "{params},{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                s.seed,
                s.kernel,
                s.experts,
                s.rounds,
                s.gamma,
                s.exp_regret,
                s.real_regret,
                s.bound_var,
                s.bound_range,
                s.within_bounds
            )),
            Err(e) => {
                eprintln!("error: {e:#}");
                first_error.get_or_insert(e);
            }
        }
    }
    lines.push(String::new());
    fs::write(&summary_path, lines.join("\n")).with_context(|| format!("writing {}", summary_path.display()))?;
    eprintln!("{} runs, summary in {}", lines.len() - 2, summary_path.display());
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn verify(args: VerifyArgs) -> Result<bool> {
    let mut ok = true;
    for o in run_suite(args.seed, args.cases)? {
        let tag = if o.passed() { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {} cases, {} failed, max err {:.3e}", o.name, o.cases, o.failures, o.max_error);
        ok &= o.passed();
    }
    Ok(ok)
}

fn budget_for(args: &BoundsArgs, rows: usize) -> Result<f64> {
    if let Some(w) = args.budget {
        return Ok(w);
    }
    let Some(experts) = args.experts else {
        bail!("pass --budget, or --experts (with --kernel) to derive it");
    };
    let mut b = ConfigBuilder::new();
    b.set("kernel", &args.kernel)?;
    b.set("experts", &experts.to_string())?;
    for p in &args.kernel_param {
        b.set("kernel-param", p)?;
    }
    let kernel = b.build()?.kernel.build(experts)?;
    let horizon = args.rounds.unwrap_or(rows);
    kernel
        .budget(horizon)
        .with_context(|| format!("kernel '{}' declares no budget", kernel.name()))
}

fn bounds(args: BoundsArgs) -> Result<bool> {
    let table = read_csv(&args.csv)?;
    let budget = budget_for(&args, table.rows.len())?;
    let r = recompute_bounds(&table, budget)?;
    let b = r.report;
    println!("rows            {}", r.rows);
    println!("W_T             {:.12}", b.budget);
    println!("D_T             {:.12}", b.max_range);
    println!("V_T*            {:.12}", b.total_variance);
    let source = if r.observed_ranges { "d column" } else { "recovered from bound_range" };
    println!("sum d_t^2       {:.12} ({source})", b.sum_sq_range);
    println!("bound_var       {:.12}", b.bound_var);
    println!("bound_range     {:.12}", b.bound_range);
    println!("bound_var drift {:.3e}", r.bound_var_mismatch);
    if r.violations.is_empty() {
        println!("regret within both bounds on every row");
        Ok(true)
    } else {
        println!("regret exceeds a bound on {} rows, first at t={}", r.violations.len(), r.violations[0]);
        Ok(false)
    }
}

fn report_error(e: &anyhow::Error) -> ExitCode {
    eprintln!("error: {e:#}");
    match e.downcast_ref::<Error>() {
        Some(Error::Invariant { .. }) => ExitCode::from(3),
        _ => ExitCode::FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => run(a).map(|_| true),
        Command::Sweep(a) => sweep(a).map(|_| true),
        Command::Verify(a) => verify(a),
        Command::Bounds(a) => bounds(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => report_error(&e),
    }
}

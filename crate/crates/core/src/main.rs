use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use wavesolve::basis::MotherWavelet;
use wavesolve::error::{Error, Result};
use wavesolve::problems::get_problem;
use wavesolve::report::{
    emit, emit_sweep, evaluate, evaluation_grid, load_oracle, oracle_path, parse_sweep_values, reference_values,
    run_protocol, sweep, worker_threads, OracleSolution, Snapshot, SweepAxis,
};
use wavesolve::training::TrainConfig;

#[derive(Parser)]
#[command(name = "wavesolve", version, about = "Wavelet-expansion PINN solver for singularly perturbed problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on every seed, evaluate and write the report.
    Solve(RunArgs),
    /// Repeat the protocol over one hyperparameter.
    Sweep(RunArgs),
    /// Compute and cache the reference solution of a problem.
    Oracle(OracleArgs),
    /// Re-evaluate a saved snapshot.
    Eval(EvalArgs),
}

/// Run settings. Every flag can also be given as a key in the `--config` file.
#[derive(Args, Deserialize, Default, Debug, Clone)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct RunArgs {
    /// TOML file with the same keys as the flags; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// gaussian or mexican
    #[arg(long)]
    wavelet: Option<String>,
    /// Lowest resolution level per dimension, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    jmin: Option<Vec<i32>>,
    /// Highest resolution level per dimension, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    jmax: Option<Vec<i32>>,
    /// Hidden layers.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// sin or tanh
    #[arg(long)]
    activation: Option<String>,
    /// Interior collocation points.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    boundary_points: Option<usize>,
    #[arg(long)]
    initial_points: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Adam steps on the expansion coefficients after the network phase.
    #[arg(long)]
    finetune_iters: Option<usize>,
    #[arg(long)]
    finetune_lr: Option<f64>,
    /// Wall-clock cap per training run in seconds.
    #[arg(long)]
    time_limit: Option<f64>,
    /// Loss-history sampling interval.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Directory of cached oracle solutions.
    #[arg(long)]
    oracle_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sweep axis: resolution, points or architecture.
    #[arg(long)]
    axis: Option<String>,
    /// Sweep values, e.g. `2,4,8` or `4x50,6x100`.
    #[arg(long)]
    values: Option<String>,
}

macro_rules! merge {
    ($flags:ident, $file:ident, $($f:ident),*) => {
        RunArgs { config: None, $($f: $flags.$f.or($file.$f)),* }
    };
}

impl RunArgs {
    fn resolve(self) -> Result<Self> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: RunArgs = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let flags = self;
        Ok(merge!(
            flags,
            file,
            problem,
            epsilon,
            wavelet,
            jmin,
            jmax,
            layers,
            width,
            activation,
            points,
            boundary_points,
            initial_points,
            iters,
            lr,
            finetune_iters,
            finetune_lr,
            time_limit,
            stride,
            seeds,
            oracle_dir,
            out,
            axis,
            values
        ))
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let problem = self
            .problem
            .as_deref()
            .ok_or_else(|| Error::config("--problem is required"))?;
        let wavelet = match &self.wavelet {
            Some(w) => MotherWavelet::parse(w)?,
            None => MotherWavelet::Gaussian,
        };
        let mut c = TrainConfig::preset(problem, wavelet)?;
        c.epsilon = self.epsilon;
        for (levels, lower) in [(&self.jmin, true), (&self.jmax, false)] {
            let Some(levels) = levels else { continue };
            if levels.len() != 1 && levels.len() != c.resolutions.len() {
                return Err(Error::config(format!(
                    "expected 1 or {} resolution levels, got {}",
                    c.resolutions.len(),
                    levels.len()
                )));
            }
            for (d, r) in c.resolutions.iter_mut().enumerate() {
                let j = levels[d.min(levels.len() - 1)];
                if lower {
                    r.0 = j;
                } else {
                    r.1 = j;
                }
            }
        }
        if let Some(r) = c.resolutions.iter().find(|r| r.0 > r.1) {
            return Err(Error::config(format!("empty resolution range [{}, {}]", r.0, r.1)));
        }
        if let Some(a) = &self.activation {
            c.activation = wavesolve::network::Activation::parse(a)?;
        }
        macro_rules! set {
            ($src:ident => $dst:ident) => {
                if let Some(v) = self.$src {
                    c.$dst = v;
                }
            };
        }
        set!(layers => depth);
        set!(width => width);
        set!(points => n_interior);
        set!(boundary_points => n_boundary);
        set!(initial_points => n_initial);
        set!(iters => iterations);
        set!(lr => lr);
        set!(finetune_iters => finetune_iterations);
        set!(finetune_lr => finetune_lr);
        set!(stride => history_stride);
        if self.time_limit.is_some() {
            c.time_limit_seconds = self.time_limit;
        }
        c.validate()?;
        Ok(c)
    }

    fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| (1..=5).collect())
    }

    fn oracle_dir(&self) -> PathBuf {
        self.oracle_dir.clone().unwrap_or_else(|| PathBuf::from("oracles"))
    }

    fn out_dir(&self, problem: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| Path::new("out").join(problem))
    }
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    problem: String,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value = "oracles")]
    oracle_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Snapshot written by `solve` (seed_<s>/snapshot.json).
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long, default_value = "oracles")]
    oracle_dir: PathBuf,
    /// Write solution.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn oracle_for(config: &TrainConfig, dir: &Path) -> Result<Option<OracleSolution>> {
    let spec = config.spec()?;
    if spec.has_exact() {
        return Ok(None);
    }
    match load_oracle(dir, &spec)? {
        Some(o) => Ok(Some(o)),
        None => Err(Error::MissingReference(format!(
            "{} (expected {})",
            spec.name,
            oracle_path(dir, &spec).display()
        ))),
    }
}

fn fmt_errors(names: &[String], values: &[f64]) -> String {
    names
        .iter()
        .zip(values)
        .map(|(n, v)| format!("{n} {v:.3e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn solve(args: RunArgs) -> Result<()> {
    let args = args.resolve()?;
    let config = args.train_config()?;
    let oracle = oracle_for(&config, &args.oracle_dir())?;
    let report = run_protocol(&config, &args.seeds(), oracle.as_ref(), worker_threads())?;
    let out = args.out_dir(&config.problem);
    emit(&report, &out)?;
    for run in &report.runs {
        match (&run.errors, &run.failure) {
            (Some(e), _) => println!(
                "seed {}: {}{}",
                run.seed,
                fmt_errors(&report.field_names, e),
                if run.time_limited { " (stopped at time limit)" } else { "" }
            ),
            (None, Some(f)) => println!("seed {}: failed: {f}", run.seed),
            (None, None) => println!("seed {}: failed", run.seed),
        }
    }
    if let (Some(m), Some(s)) = (&report.mean_error, &report.std_error) {
        for (k, name) in report.field_names.iter().enumerate() {
            println!("{name}: mean relative L2 {:.3e} ± {:.3e}", m[k], s[k]);
        }
    }
    if report.flagged {
        println!("failed seeds: {:?}", report.failed_seeds);
    }
    println!("mean training time {:.1} s", report.mean_wall_seconds());
    println!("wrote {}", out.display());
    Ok(())
}

fn run_sweep(args: RunArgs) -> Result<()> {
    let args = args.resolve()?;
    let config = args.train_config()?;
    let axis = SweepAxis::parse(args.axis.as_deref().ok_or_else(|| Error::config("--axis is required"))?)?;
    let values = parse_sweep_values(axis, args.values.as_deref().ok_or_else(|| Error::config("--values is required"))?)?;
    let oracle = oracle_for(&config, &args.oracle_dir())?;
    let cells = sweep(&config, &values, &args.seeds(), oracle.as_ref(), worker_threads())?;
    let spec = config.spec()?;
    let out = args.out_dir(&format!("{}_sweep_{}", config.problem, axis.name()));
    emit_sweep(axis, &spec, &cells, &out)?;
    for cell in &cells {
        match &cell.report {
            Ok(r) => match &r.mean_error {
                Some(m) => println!("{} = {}: {}", axis.name(), cell.value.label(), fmt_errors(&r.field_names, m)),
                None => println!("{} = {}: all seeds failed", axis.name(), cell.value.label()),
            },
            Err(e) => println!("{} = {}: {e}", axis.name(), cell.value.label()),
        }
    }
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<()> {
    let spec = get_problem(&args.problem, args.epsilon)?;
    let Some(sol) = OracleSolution::compute(&spec)? else {
        println!("{} has an exact solution; nothing to compute", spec.name);
        return Ok(());
    };
    std::fs::create_dir_all(&args.oracle_dir).map_err(|e| Error::io(&args.oracle_dir, e))?;
    let path = oracle_path(&args.oracle_dir, &spec);
    sol.write_csv(&path)?;
    let change = sol.refinement_change();
    if change.is_finite() {
        println!("refinement change {change:.3e}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let snap = Snapshot::load(&args.snapshot)?;
    let spec = snap.config.spec()?;
    let oracle = oracle_for(&snap.config, &args.oracle_dir)?;
    let grid = evaluation_grid(&spec)?;
    let reference = reference_values(&spec, &grid, oracle.as_ref())?;
    let ev = evaluate(&snap.config, &spec, &snap.coefficients, &snap.biases, &grid, &reference)?;
    println!("{}", fmt_errors(&spec.field_names, &ev.errors));
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let path = out.join("solution.csv");
        std::fs::write(&path, wavesolve::report::solution_csv(&spec, &ev)).map_err(|e| Error::io(&path, e))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(a) => solve(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Oracle(a) => oracle(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

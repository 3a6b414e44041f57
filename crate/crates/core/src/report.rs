//! Metrics, multi-seed protocol runs, sweeps and file output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{enumerate_family_capped, ResolutionRange};
use crate::error::{Error, Result};
use crate::matrices::{assemble, reconstruct};
use crate::oracles::{self, FhnParams, GridSolution, SpaceTimeSolution, Trajectory};
use crate::problems::{ProblemKind, ProblemSpec};
use crate::sampling::{uniform_grid, Geometry, PointSet};
use crate::training::{train, HistoryEntry, LossBreakdown, TrainConfig};

/// `√(Σ(u−û)² / Σu²)`.
pub fn relative_l2(exact: &[f64], predicted: &[f64]) -> Result<f64> {
    if exact.len() != predicted.len() {
        return Err(Error::shape("predicted values", exact.len(), predicted.len()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (u, v) in exact.iter().zip(predicted) {
        num += (u - v) * (u - v);
        den += u * u;
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric);
    }
    Ok((num / den).sqrt())
}

/// Default evaluation grid: 1000 points in 1D, 101×101 in 2D.
pub fn evaluation_grid(spec: &ProblemSpec) -> Result<PointSet> {
    let bounds = spec.geometry.bounds();
    let res: Vec<usize> = if bounds.len() == 1 { vec![1000] } else { vec![101, 101] };
    uniform_grid(&bounds, &res)
}

/// Numerical reference for a problem without a closed-form solution.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleSolution {
    Bvp(GridSolution),
    Fhn(Trajectory),
    AllenCahn(SpaceTimeSolution),
}

/// Mesh sizes used when an oracle is computed for evaluation.
pub const BVP_CELLS: usize = 4096;
pub const FHN_TOLERANCE: f64 = 1e-6;
pub const ALLEN_CAHN_CELLS: usize = 1024;
pub const ALLEN_CAHN_STEPS: usize = 4000;

impl OracleSolution {
    /// Runs the reference solver for `spec`, or `None` when the problem has an exact solution.
    pub fn compute(spec: &ProblemSpec) -> Result<Option<Self>> {
        Ok(match spec.kind {
            ProblemKind::NeumannBvp => Some(Self::Bvp(oracles::solve_bvp_fd(spec.epsilon, BVP_CELLS)?)),
            ProblemKind::Fhn { a, b, i, r } => {
                let t_end = spec.geometry.bounds()[0].1;
                let params = FhnParams {
                    a,
                    b,
                    i,
                    r,
                    ..FhnParams::preset(spec.epsilon)
                };
                Some(Self::Fhn(oracles::solve_fhn(&params, t_end, FHN_TOLERANCE)?))
            }
            ProblemKind::AllenCahn => Some(Self::AllenCahn(oracles::solve_allen_cahn(
                spec.epsilon,
                ALLEN_CAHN_CELLS,
                ALLEN_CAHN_STEPS,
            )?)),
            _ => None,
        })
    }

    /// Reference value of `field` at `p`.
    pub fn value(&self, p: &[f64], field: usize) -> f64 {
        match self {
            Self::Bvp(s) => oracles::interpolate(&s.x, &s.u, p[0]),
            Self::Fhn(tr) => oracles::interpolate(&tr.t, if field == 0 { &tr.v } else { &tr.w }, p[0]),
            Self::AllenCahn(s) => s.sample(p[0], p[1]),
        }
    }

    /// Change between the last two refinement levels of the solver.
    pub fn refinement_change(&self) -> f64 {
        match self {
            Self::Bvp(_) => f64::NAN,
            Self::Fhn(tr) => tr.refinement_change,
            Self::AllenCahn(s) => s.refinement_change,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        match self {
            Self::Bvp(s) => oracles::write_csv(path, &["x", "u"], &[&s.x, &s.u]),
            Self::Fhn(tr) => oracles::write_csv(path, &["t", "v", "w"], &[&tr.t, &tr.v, &tr.w]),
            Self::AllenCahn(s) => {
                let n = s.t.len() * s.x.len();
                let (mut x, mut t, mut u) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
                for (k, row) in s.u.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        x.push(s.x[j]);
                        t.push(s.t[k]);
                        u.push(*v);
                    }
                }
                oracles::write_csv(path, &["x", "t", "u"], &[&x, &t, &u])
            }
        }
    }

    /// Loads a CSV written by [`OracleSolution::write_csv`] for `spec`.
    pub fn read_csv(spec: &ProblemSpec, path: &Path) -> Result<Self> {
        let (header, cols) = oracles::read_csv(path)?;
        let bad = |message: &str| Error::Format {
            path: path.into(),
            message: message.into(),
        };
        let expect = match spec.kind {
            ProblemKind::NeumannBvp => vec!["x", "u"],
            ProblemKind::Fhn { .. } => vec!["t", "v", "w"],
            ProblemKind::AllenCahn => vec!["x", "t", "u"],
            _ => return Err(Error::config(format!("`{}` has an exact solution", spec.name))),
        };
        if header != expect {
            return Err(bad(&format!("expected columns {}", expect.join(","))));
        }
        if cols[0].len() < 2 {
            return Err(bad("too few rows"));
        }
        let mut cols = cols.into_iter();
        let mut next = || cols.next().unwrap();
        Ok(match spec.kind {
            ProblemKind::NeumannBvp => Self::Bvp(GridSolution {
                x: next(),
                u: next(),
                residual: f64::NAN,
            }),
            ProblemKind::Fhn { .. } => Self::Fhn(Trajectory {
                t: next(),
                v: next(),
                w: next(),
                step: f64::NAN,
                refinement_change: f64::NAN,
            }),
            _ => {
                let (x, t, u) = (next(), next(), next());
                let nx = t.iter().take_while(|&&s| s == t[0]).count();
                if nx < 2 || u.len() % nx != 0 {
                    return Err(bad("space-time rows are not a full grid"));
                }
                Self::AllenCahn(SpaceTimeSolution {
                    x: x[..nx].to_vec(),
                    t: t.iter().step_by(nx).copied().collect(),
                    u: u.chunks(nx).map(<[f64]>::to_vec).collect(),
                    refinement_change: f64::NAN,
                })
            }
        })
    }
}

/// File name of the cached oracle for `spec` inside a cache directory.
pub fn oracle_path(dir: &Path, spec: &ProblemSpec) -> PathBuf {
    dir.join(format!("{}_eps{:e}.csv", spec.name, spec.epsilon))
}

/// Loads the cached oracle for `spec` if one exists.
pub fn load_oracle(dir: &Path, spec: &ProblemSpec) -> Result<Option<OracleSolution>> {
    let path = oracle_path(dir, spec);
    if path.exists() {
        OracleSolution::read_csv(spec, &path).map(Some)
    } else {
        Ok(None)
    }
}

/// Reference values per field on `grid`.
pub fn reference_values(spec: &ProblemSpec, grid: &PointSet, oracle: Option<&OracleSolution>) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::with_capacity(grid.len()); spec.fields];
    if spec.has_exact() {
        for p in grid.iter() {
            let v = spec.exact(p).expect("exact solution");
            for (f, col) in out.iter_mut().enumerate() {
                col.push(v[f]);
            }
        }
        return Ok(out);
    }
    let oracle = oracle.ok_or_else(|| Error::MissingReference(spec.name.clone()))?;
    for p in grid.iter() {
        for (f, col) in out.iter_mut().enumerate() {
            col.push(oracle.value(p, f));
        }
    }
    Ok(out)
}

/// Prediction and errors on an evaluation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub grid: PointSet,
    pub reference: Vec<Vec<f64>>,
    pub predicted: Vec<Vec<f64>>,
    pub abs_error: Vec<Vec<f64>>,
    pub errors: Vec<f64>,
}

/// Reconstructs the expansion on `grid` and compares it with `reference`.
pub fn evaluate(
    config: &TrainConfig,
    spec: &ProblemSpec,
    coefficients: &[Vec<f64>],
    biases: &[f64],
    grid: &PointSet,
    reference: &[Vec<f64>],
) -> Result<Evaluation> {
    if coefficients.len() != spec.fields || biases.len() != spec.fields || reference.len() != spec.fields {
        return Err(Error::shape("fields", spec.fields, coefficients.len()));
    }
    let ranges: Vec<ResolutionRange> = config.resolutions.iter().map(|&(a, b)| ResolutionRange::new(a, b)).collect();
    let family = enumerate_family_capped(config.wavelet, &spec.geometry.bounds(), &ranges, config.max_members)?;
    let order = vec![0u8; spec.dim()];
    let mats = assemble(&family, grid, &[order.clone()])?;
    let mut predicted = Vec::with_capacity(spec.fields);
    let mut abs_error = Vec::with_capacity(spec.fields);
    let mut errors = Vec::with_capacity(spec.fields);
    for f in 0..spec.fields {
        let pred = reconstruct(&mats, &coefficients[f], biases[f], &order)?;
        errors.push(relative_l2(&reference[f], &pred)?);
        abs_error.push(reference[f].iter().zip(&pred).map(|(u, v)| (u - v).abs()).collect());
        predicted.push(pred);
    }
    Ok(Evaluation {
        grid: grid.clone(),
        reference: reference.to_vec(),
        predicted,
        abs_error,
        errors,
    })
}

/// Trained expansion saved for later re-evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub config: TrainConfig,
    pub coefficients: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl Snapshot {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("snapshot serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            message: e.to_string(),
        })
    }
}

/// One seed of a protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    /// Relative L2 error per field; absent when the run failed.
    pub errors: Option<Vec<f64>>,
    pub final_loss: Option<LossBreakdown>,
    pub iterations_run: usize,
    /// Loss history file, relative to the output directory.
    pub history_file: String,
    pub failure: Option<String>,
    /// Training stopped at the time limit before its iteration budget.
    #[serde(default)]
    pub time_limited: bool,
    /// Seconds in the training loop. Kept out of `report.json`.
    #[serde(skip)]
    pub wall_seconds: f64,
    #[serde(skip)]
    pub history: Vec<HistoryEntry>,
    #[serde(skip)]
    pub evaluation: Option<Evaluation>,
    #[serde(skip)]
    pub snapshot: Option<Snapshot>,
}

/// Multi-seed summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub problem: String,
    pub epsilon: f64,
    pub field_names: Vec<String>,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    /// Mean relative L2 per field over the successful runs.
    pub mean_error: Option<Vec<f64>>,
    /// Sample standard deviation per field (zero for a single run).
    pub std_error: Option<Vec<f64>>,
    pub failed_seeds: Vec<u64>,
    /// Set when some seeds failed and the statistics use the survivors.
    pub flagged: bool,
    pub runs: Vec<RunReport>,
}

impl AggregateReport {
    fn from_runs(config: &TrainConfig, spec: &ProblemSpec, runs: Vec<RunReport>) -> Self {
        let ok: Vec<&Vec<f64>> = runs.iter().filter_map(|r| r.errors.as_ref()).collect();
        let failed_seeds: Vec<u64> = runs.iter().filter(|r| r.errors.is_none()).map(|r| r.seed).collect();
        let (mean_error, std_error) = if ok.is_empty() {
            (None, None)
        } else {
            let n = ok.len() as f64;
            let mean: Vec<f64> = (0..spec.fields).map(|f| ok.iter().map(|e| e[f]).sum::<f64>() / n).collect();
            let std = (0..spec.fields)
                .map(|f| {
                    if ok.len() < 2 {
                        0.0
                    } else {
                        (ok.iter().map(|e| (e[f] - mean[f]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                    }
                })
                .collect();
            (Some(mean), Some(std))
        };
        Self {
            problem: spec.name.clone(),
            epsilon: spec.epsilon,
            field_names: spec.field_names.clone(),
            config: config.clone(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            mean_error,
            std_error,
            flagged: !failed_seeds.is_empty(),
            failed_seeds,
            runs,
        }
    }

    /// Mean training-loop seconds over all runs.
    pub fn mean_wall_seconds(&self) -> f64 {
        self.runs.iter().map(|r| r.wall_seconds).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn run_seed(config: &TrainConfig, seed: u64, spec: &ProblemSpec, grid: &PointSet, reference: &[Vec<f64>]) -> RunReport {
    let mut cfg = config.clone();
    cfg.seed = seed;
    let mut report = RunReport {
        seed,
        errors: None,
        final_loss: None,
        iterations_run: 0,
        history_file: format!("seed_{seed}/loss.csv"),
        failure: None,
        time_limited: false,
        wall_seconds: 0.0,
        history: Vec::new(),
        evaluation: None,
        snapshot: None,
    };
    let outcome = match train(&cfg) {
        Ok(o) => o,
        Err(e) => {
            report.failure = Some(e.to_string());
            return report;
        }
    };
    report.final_loss = Some(outcome.final_loss);
    report.iterations_run = outcome.iterations_run;
    report.wall_seconds = outcome.train_seconds;
    report.time_limited = outcome.time_limited;
    report.history = outcome.history;
    if let Some(d) = outcome.diverged {
        report.failure = Some(d);
        return report;
    }
    match evaluate(&cfg, spec, &outcome.coefficients, &outcome.biases, grid, reference) {
        Ok(ev) => {
            report.errors = Some(ev.errors.clone());
            report.evaluation = Some(ev);
        }
        Err(e) => report.failure = Some(e.to_string()),
    }
    report.snapshot = Some(Snapshot {
        config: cfg,
        coefficients: outcome.coefficients,
        biases: outcome.biases,
    });
    report
}

/// Worker count from `WAVESOLVE_THREADS`, defaulting to the available cores.
pub fn worker_threads() -> usize {
    std::env::var("WAVESOLVE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains once per seed, evaluates and aggregates. Seeds run on up to
/// `threads` workers; results are ordered as `seeds`.
pub fn run_protocol(
    config: &TrainConfig,
    seeds: &[u64],
    oracle: Option<&OracleSolution>,
    threads: usize,
) -> Result<AggregateReport> {
    if seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    config.validate()?;
    let spec = config.spec()?;
    let grid = evaluation_grid(&spec)?;
    let reference = reference_values(&spec, &grid, oracle)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let runs: Vec<RunReport> =
        pool.install(|| seeds.par_iter().map(|&s| run_seed(config, s, &spec, &grid, &reference)).collect());
    Ok(AggregateReport::from_runs(config, &spec, runs))
}

/// Hyperparameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Upper resolution level on every axis.
    Resolution,
    /// Number of interior collocation points.
    Points,
    /// Hidden depth and width.
    Architecture,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "resolution" | "j" | "J" => Ok(Self::Resolution),
            "points" | "n" | "N" => Ok(Self::Points),
            "architecture" | "arch" => Ok(Self::Architecture),
            other => Err(Error::config(format!(
                "unknown sweep axis `{other}` (expected resolution, points or architecture)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Resolution => "resolution",
            Self::Points => "points",
            Self::Architecture => "architecture",
        }
    }
}

/// One sweep setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepValue {
    Level(i32),
    Count(usize),
    Shape { depth: usize, width: usize },
}

impl SweepValue {
    pub fn label(&self) -> String {
        match *self {
            Self::Level(j) => j.to_string(),
            Self::Count(n) => n.to_string(),
            Self::Shape { depth, width } => format!("{depth}x{width}"),
        }
    }

    pub fn apply(&self, config: &TrainConfig) -> Result<TrainConfig> {
        let mut c = config.clone();
        match *self {
            Self::Level(j) => {
                for r in c.resolutions.iter_mut() {
                    if j < r.0 {
                        return Err(Error::config(format!("level {j} is below the lowest level {}", r.0)));
                    }
                    r.1 = j;
                }
            }
            Self::Count(n) => c.n_interior = n,
            Self::Shape { depth, width } => {
                c.depth = depth;
                c.width = width;
            }
        }
        Ok(c)
    }
}

/// Parses a comma-separated list such as `2,4,8`, `100,1000` or `4x50,6x100`.
pub fn parse_sweep_values(axis: SweepAxis, text: &str) -> Result<Vec<SweepValue>> {
    let bad = |v: &str| Error::config(format!("bad {} sweep value `{v}`", axis.name()));
    let values = text
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| match axis {
            SweepAxis::Resolution => v.parse().map(SweepValue::Level).map_err(|_| bad(v)),
            SweepAxis::Points => v.parse().map(SweepValue::Count).map_err(|_| bad(v)),
            SweepAxis::Architecture => {
                let (d, w) = v.split_once(['x', 'X']).ok_or_else(|| bad(v))?;
                Ok(SweepValue::Shape {
                    depth: d.parse().map_err(|_| bad(v))?,
                    width: w.parse().map_err(|_| bad(v))?,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::config("a sweep needs at least one value"));
    }
    Ok(values)
}

/// One cell of a sweep table.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub value: SweepValue,
    pub report: std::result::Result<AggregateReport, String>,
}

/// Runs the protocol for each value; failures are recorded per cell.
pub fn sweep(
    base: &TrainConfig,
    values: &[SweepValue],
    seeds: &[u64],
    oracle: Option<&OracleSolution>,
    threads: usize,
) -> Result<Vec<SweepCell>> {
    if values.is_empty() {
        return Err(Error::config("a sweep needs at least one value"));
    }
    Ok(values
        .iter()
        .map(|v| SweepCell {
            value: *v,
            report: v
                .apply(base)
                .and_then(|c| run_protocol(&c, seeds, oracle, threads))
                .map_err(|e| e.to_string()),
        })
        .collect())
}

fn sci(v: f64) -> String {
    format!("{v:.16e}")
}

/// Sweep table: axis value, then mean and std per field, then the number of successful runs.
pub fn sweep_csv(axis: SweepAxis, field_names: &[String], cells: &[SweepCell]) -> String {
    let mut out = String::from(axis.name());
    for f in field_names {
        let _ = write!(out, ",mean_{f},std_{f}");
    }
    out.push_str(",runs_ok\n");
    for cell in cells {
        out.push_str(&cell.value.label());
        match &cell.report {
            Ok(r) => {
                for f in 0..field_names.len() {
                    match (&r.mean_error, &r.std_error) {
                        (Some(m), Some(s)) => {
                            let _ = write!(out, ",{},{}", sci(m[f]), sci(s[f]));
                        }
                        _ => out.push_str(",NaN,NaN"),
                    }
                }
                let _ = writeln!(out, ",{}", r.runs.len() - r.failed_seeds.len());
            }
            Err(_) => {
                for _ in field_names {
                    out.push_str(",NaN,NaN");
                }
                out.push_str(",0\n");
            }
        }
    }
    out
}

fn coordinate_names(geometry: &Geometry) -> &'static [&'static str] {
    match geometry {
        Geometry::Interval { .. } => &["x"],
        Geometry::TimeInterval { .. } => &["t"],
        Geometry::SpaceTime { .. } => &["x", "t"],
        Geometry::Rectangle { .. } => &["x", "y"],
    }
}

/// Solution table: coordinates, then reference, prediction and absolute error per field.
pub fn solution_csv(spec: &ProblemSpec, ev: &Evaluation) -> String {
    let mut out = coordinate_names(&spec.geometry).join(",");
    for f in &spec.field_names {
        let _ = write!(out, ",exact_{f},predicted_{f},abs_error_{f}");
    }
    out.push('\n');
    for (i, p) in ev.grid.iter().enumerate() {
        let mut row: Vec<String> = p.iter().map(|&v| sci(v)).collect();
        for f in 0..spec.fields {
            row.push(sci(ev.reference[f][i]));
            row.push(sci(ev.predicted[f][i]));
            row.push(sci(ev.abs_error[f][i]));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Loss history table.
pub fn loss_csv(history: &[HistoryEntry]) -> String {
    let mut out = String::from("iteration,total,residual,ic,bc\n");
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            h.iteration,
            sci(h.loss.total),
            sci(h.loss.residual),
            sci(h.loss.ic),
            sci(h.loss.bc)
        );
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `solution.csv` (first successful seed), and per
/// seed `seed_<s>/loss.csv`, `seed_<s>/solution.csv` and
/// `seed_<s>/snapshot.json`. Training times go to `timing.json`.
pub fn emit(report: &AggregateReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spec = report.config.spec()?;
    write(&dir.join("report.json"), &report.to_json())?;
    let mut first = true;
    for run in &report.runs {
        let sd = dir.join(format!("seed_{}", run.seed));
        std::fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        write(&dir.join(&run.history_file), &loss_csv(&run.history))?;
        if let Some(ev) = &run.evaluation {
            let text = solution_csv(&spec, ev);
            write(&sd.join("solution.csv"), &text)?;
            if first {
                write(&dir.join("solution.csv"), &text)?;
                first = false;
            }
        }
        if let Some(s) = &run.snapshot {
            s.save(&sd.join("snapshot.json"))?;
        }
    }
    let timing = serde_json::json!({
        "mean_train_seconds": report.mean_wall_seconds(),
        "train_seconds": report.runs.iter().map(|r| (r.seed.to_string(), r.wall_seconds.into())).collect::<serde_json::Map<_, _>>(),
        "note": "training loop only, excluding setup and evaluation",
    });
    write(&dir.join("timing.json"), &(serde_json::to_string_pretty(&timing).expect("json") + "\n"))
}

/// Writes `sweep.csv` and one protocol directory per cell.
pub fn emit_sweep(axis: SweepAxis, spec: &ProblemSpec, cells: &[SweepCell], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("sweep.csv"), &sweep_csv(axis, &spec.field_names, cells))?;
    for cell in cells {
        let sub = dir.join(format!("{}_{}", axis.name(), cell.value.label()));
        match &cell.report {
            Ok(r) => emit(r, &sub)?,
            Err(msg) => {
                std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                write(&sub.join("error.txt"), &format!("{msg}\n"))?;
            }
        }
    }
    Ok(())
}

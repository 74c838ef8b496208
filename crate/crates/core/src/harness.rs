//! Multi-trial experiments at a fixed sample budget.
//!
//! Trial `t` of every seeker draws from `RngStream(base_seed, t)`. Each
//! trajectory is reduced to two grids as soon as it finishes: iteration
//! checkpoints (every `k ≤ 100`, then 100 per decade, then the last `k`) and
//! sample checkpoints at every 1% of the budget, with the last observation
//! carried forward. Curves hold the trial mean and median at each checkpoint.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::exec::{map_indices, Execution};
use crate::game::{benchmark_game, solve_equilibrium, AffineGame, Game, EQUILIBRIUM_TOL};
use crate::noise::{CorruptionMode, NoiseKind, NoiseModel, RngStream};
use crate::seekers::{run_seeker, BudgetAccounting, IterationTrace, RunSetup, SeekerConfig};

pub const CURVE_HEADER: &str = "axis,grid,mean_error,median_error,trials";
pub const TRIALS_HEADER: &str = "trial,k,samples,abs_error,rel_error,sq_error";

const DENSE_ITERATIONS: usize = 100;
const POINTS_PER_DECADE: f64 = 100.0;
const SAMPLE_CHECKPOINTS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    Samples,
    Iterations,
    /// Per-trial final errors; the grid holds trial indices.
    Final,
}

impl Axis {
    pub fn id(&self) -> &'static str {
        match self {
            Axis::Samples => "samples",
            Axis::Iterations => "iterations",
            Axis::Final => "final",
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "samples" => Ok(Axis::Samples),
            "iterations" => Ok(Axis::Iterations),
            "final" => Ok(Axis::Final),
            _ => Err(invalid(
                "axis",
                format!("expected samples or iterations (got `{s}`)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorKind {
    #[default]
    Relative,
    Absolute,
    Squared,
}

impl ErrorKind {
    pub fn id(&self) -> &'static str {
        match self {
            ErrorKind::Relative => "relative",
            ErrorKind::Absolute => "absolute",
            ErrorKind::Squared => "squared",
        }
    }

    pub fn of(&self, t: &IterationTrace) -> f64 {
        match self {
            ErrorKind::Relative => t.rel_error,
            ErrorKind::Absolute => t.abs_error,
            ErrorKind::Squared => t.sq_error(),
        }
    }
}

impl FromStr for ErrorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relative" => Ok(ErrorKind::Relative),
            "absolute" => Ok(ErrorKind::Absolute),
            "squared" => Ok(ErrorKind::Squared),
            _ => Err(invalid(
                "error_kind",
                format!("expected relative, absolute or squared (got `{s}`)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GameSpec {
    Benchmark { n: usize },
    Diagonal { n: usize, a: f64, r: f64 },
}

impl GameSpec {
    pub fn build(&self) -> Result<AffineGame> {
        match *self {
            GameSpec::Benchmark { n } => benchmark_game(n),
            GameSpec::Diagonal { n, a, r } => AffineGame::diagonal(n, a, r),
        }
    }

    pub fn n_players(&self) -> usize {
        match *self {
            GameSpec::Benchmark { n } | GameSpec::Diagonal { n, .. } => n,
        }
    }
}

impl fmt::Display for GameSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GameSpec::Benchmark { n } => write!(f, "benchmark{n}"),
            GameSpec::Diagonal { n, a, r } => write!(f, "diag(n={n},a={a},r={r})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub game: GameSpec,
    pub noise: NoiseModel,
    pub seekers: Vec<SeekerConfig>,
    pub budget: u64,
    pub trials: usize,
    pub base_seed: u64,
    pub error_kind: ErrorKind,
    pub accounting: BudgetAccounting,
    /// Initial profile; `None` starts every player at 0.
    pub x0: Option<Vec<f64>>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(invalid("trials", "must be at least 1"));
        }
        if self.budget == 0 {
            return Err(invalid("budget", "must be positive"));
        }
        if self.seekers.is_empty() {
            return Err(invalid("seekers", "at least one seeker is required"));
        }
        for (i, s) in self.seekers.iter().enumerate() {
            s.validate()?;
            if self.seekers[..i].iter().any(|o| o.label == s.label) {
                return Err(invalid("seekers", format!("duplicate label `{}`", s.label)));
            }
            if s.label.is_empty()
                || !s
                    .label
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(invalid(
                    "seekers",
                    format!("label `{}` must be [A-Za-z0-9_-]+", s.label),
                ));
            }
        }
        self.noise.kind.validate()?;
        if let Some(x0) = &self.x0 {
            if x0.len() != self.game.n_players() {
                return Err(Error::DimensionMismatch {
                    expected: self.game.n_players(),
                    got: x0.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateCurve {
    pub axis: Axis,
    pub grid: Vec<u64>,
    pub mean_error: Vec<f64>,
    pub median_error: Vec<f64>,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub traces: Vec<IterationTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeekerResult {
    pub label: String,
    pub samples: AggregateCurve,
    pub iterations: AggregateCurve,
    /// Error of each trial's last iterate.
    pub per_trial_final: Vec<f64>,
    /// Trial trajectories thinned to the iteration grid.
    pub trial_records: Vec<TrialRecord>,
    pub final_iteration: usize,
    /// Iterations of trial 0 whose block plan missed the sample condition.
    pub theory_invalid_iterations: usize,
    pub beta_condition: bool,
}

impl SeekerResult {
    pub fn curve(&self, axis: Axis) -> AggregateCurve {
        match axis {
            Axis::Samples => self.samples.clone(),
            Axis::Iterations => self.iterations.clone(),
            Axis::Final => AggregateCurve {
                axis: Axis::Final,
                grid: (0..self.per_trial_final.len() as u64).collect(),
                mean_error: self.per_trial_final.clone(),
                median_error: self.per_trial_final.clone(),
                trials: 1,
            },
        }
    }

    pub fn mean_final(&self) -> f64 {
        self.per_trial_final.iter().sum::<f64>() / self.per_trial_final.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub equilibrium: Vec<f64>,
    pub seekers: Vec<SeekerResult>,
}

impl ExperimentResult {
    pub fn seeker(&self, label: &str) -> Option<&SeekerResult> {
        self.seekers.iter().find(|s| s.label == label)
    }
}

/// Iteration checkpoints up to and including `k_max`.
pub fn iteration_grid(k_max: usize) -> Vec<u64> {
    let mut grid: Vec<u64> = (0..=k_max.min(DENSE_ITERATIONS) as u64).collect();
    if k_max > DENSE_ITERATIONS {
        let lo = (DENSE_ITERATIONS as f64).log10();
        let hi = (k_max as f64).log10();
        let steps = ((hi - lo) * POINTS_PER_DECADE).floor() as usize;
        for j in 1..=steps {
            let k = 10f64.powf(lo + j as f64 / POINTS_PER_DECADE).round() as u64;
            if k > *grid.last().unwrap() && k < k_max as u64 {
                grid.push(k);
            }
        }
        grid.push(k_max as u64);
    }
    grid
}

/// Checkpoints at `0` and every 1% of the budget.
pub fn sample_grid(budget: u64) -> Vec<u64> {
    let mut grid: Vec<u64> = (0..=SAMPLE_CHECKPOINTS)
        .map(|j| j * budget / SAMPLE_CHECKPOINTS)
        .collect();
    grid.dedup();
    grid
}

/// Error at each sample checkpoint, carrying the last record forward.
fn sample_values(traces: &[IterationTrace], grid: &[u64], kind: ErrorKind) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.len());
    let mut idx = 0;
    for &c in grid {
        while idx + 1 < traces.len() && traces[idx + 1].samples <= c {
            idx += 1;
        }
        out.push(kind.of(&traces[idx]));
    }
    out
}

fn iteration_values(traces: &[IterationTrace], grid: &[u64], kind: ErrorKind) -> Vec<f64> {
    grid.iter()
        .map(|&k| {
            let i = (k as usize).min(traces.len() - 1);
            kind.of(&traces[i])
        })
        .collect()
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Mean and median across rows, column by column.
pub fn aggregate(axis: Axis, grid: Vec<u64>, rows: &[Vec<f64>]) -> AggregateCurve {
    let trials = rows.len();
    let mut mean_error = Vec::with_capacity(grid.len());
    let mut median_error = Vec::with_capacity(grid.len());
    let mut column = Vec::with_capacity(trials);
    for j in 0..grid.len() {
        column.clear();
        column.extend(rows.iter().map(|r| r[j]));
        mean_error.push(column.iter().sum::<f64>() / trials as f64);
        median_error.push(median_of(&mut column));
    }
    AggregateCurve {
        axis,
        grid,
        mean_error,
        median_error,
        trials,
    }
}

struct TrialOutput {
    samples: Vec<f64>,
    iterations: Vec<f64>,
    final_error: f64,
    thinned: Vec<IterationTrace>,
    k_max: usize,
    theory_invalid: usize,
}

pub fn run_experiment(spec: &ExperimentSpec, exec: Execution) -> Result<ExperimentResult> {
    spec.validate()?;
    let game = spec.game.build()?;
    let equilibrium = solve_equilibrium(&game, EQUILIBRIUM_TOL)?;
    let x0 = spec
        .x0
        .clone()
        .unwrap_or_else(|| vec![0.0; game.n_players()]);
    let setup = RunSetup {
        game: &game,
        equilibrium: &equilibrium,
        noise: spec.noise,
        x0: &x0,
        budget: spec.budget,
        accounting: spec.accounting,
    };
    let s_grid = sample_grid(spec.budget);

    let n_seekers = spec.seekers.len();
    let outputs = map_indices(
        n_seekers * spec.trials,
        exec,
        |job| -> Result<TrialOutput> {
            let (s, t) = (job / spec.trials, job % spec.trials);
            let config = &spec.seekers[s];
            let mut rng = RngStream::new(spec.base_seed, t as u64);
            let run = run_seeker(&setup, config, &mut rng)?;
            let k_max = run.traces.last().map_or(0, |r| r.k);
            let i_grid = iteration_grid(k_max);
            Ok(TrialOutput {
                samples: sample_values(&run.traces, &s_grid, spec.error_kind),
                iterations: iteration_values(&run.traces, &i_grid, spec.error_kind),
                final_error: spec
                    .error_kind
                    .of(run.traces.last().expect("trajectory starts at k = 0")),
                thinned: i_grid.iter().map(|&k| run.traces[k as usize]).collect(),
                k_max,
                theory_invalid: run.flags.theory_invalid_iterations,
            })
        },
    );
    let mut outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;

    let mut seekers = Vec::with_capacity(n_seekers);
    for (s, config) in spec.seekers.iter().enumerate() {
        let trials: Vec<TrialOutput> = outputs.drain(..spec.trials).collect();
        let k_max = trials[0].k_max;
        if trials.iter().any(|t| t.k_max != k_max) {
            return Err(invalid(
                "seekers",
                format!("{}: trials ended at different iterations", config.label),
            ));
        }
        debug_assert_eq!(s, seekers.len());
        let samples_rows: Vec<Vec<f64>> = trials.iter().map(|t| t.samples.clone()).collect();
        let iteration_rows: Vec<Vec<f64>> = trials.iter().map(|t| t.iterations.clone()).collect();
        seekers.push(SeekerResult {
            label: config.label.clone(),
            samples: aggregate(Axis::Samples, s_grid.clone(), &samples_rows),
            iterations: aggregate(Axis::Iterations, iteration_grid(k_max), &iteration_rows),
            per_trial_final: trials.iter().map(|t| t.final_error).collect(),
            final_iteration: k_max,
            theory_invalid_iterations: trials[0].theory_invalid,
            beta_condition: config.beta_condition_holds(spec.noise.delta),
            trial_records: trials
                .into_iter()
                .enumerate()
                .map(|(trial, t)| TrialRecord {
                    trial,
                    traces: t.thinned,
                })
                .collect(),
        });
    }
    Ok(ExperimentResult {
        equilibrium,
        seekers,
    })
}

fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Renders curves in the CSV schema. An empty list gives the header alone.
pub fn curves_to_csv(curves: &[AggregateCurve]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for c in curves {
        for j in 0..c.grid.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.axis.id(),
                c.grid[j],
                fmt_real(c.mean_error[j]),
                fmt_real(c.median_error[j]),
                c.trials
            );
        }
    }
    out
}

pub fn write_csv(curves: &[AggregateCurve], path: &Path) -> Result<()> {
    fs::write(path, curves_to_csv(curves))?;
    Ok(())
}

fn csv_error(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Csv {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

pub fn parse_csv(text: &str, path: &Path) -> Result<Vec<AggregateCurve>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CURVE_HEADER => {}
        _ => {
            return Err(csv_error(
                path,
                1,
                format!("expected header `{CURVE_HEADER}`"),
            ))
        }
    }
    let mut curves: Vec<AggregateCurve> = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(csv_error(
                path,
                line_no,
                format!("expected 5 fields, got {}", fields.len()),
            ));
        }
        let axis: Axis = fields[0]
            .parse()
            .map_err(|e: Error| csv_error(path, line_no, e.to_string()))?;
        let parse_u = |s: &str| {
            s.parse::<u64>()
                .map_err(|e| csv_error(path, line_no, format!("`{s}`: {e}")))
        };
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| csv_error(path, line_no, format!("`{s}`: {e}")))
        };
        let grid = parse_u(fields[1])?;
        let mean = parse_f(fields[2])?;
        let median = parse_f(fields[3])?;
        let trials = parse_u(fields[4])? as usize;
        match curves.last_mut() {
            Some(c) if c.axis == axis && c.trials == trials && grid > *c.grid.last().unwrap() => {
                c.grid.push(grid);
                c.mean_error.push(mean);
                c.median_error.push(median);
            }
            _ => curves.push(AggregateCurve {
                axis,
                grid: vec![grid],
                mean_error: vec![mean],
                median_error: vec![median],
                trials,
            }),
        }
    }
    Ok(curves)
}

pub fn read_csv(path: &Path) -> Result<Vec<AggregateCurve>> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text, path)
}

pub fn trials_to_csv(records: &[TrialRecord]) -> String {
    let mut out = String::from(TRIALS_HEADER);
    out.push('\n');
    for r in records {
        for t in &r.traces {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.trial,
                t.k,
                t.samples,
                fmt_real(t.abs_error),
                fmt_real(t.rel_error),
                fmt_real(t.sq_error())
            );
        }
    }
    out
}

/// Reads a per-trial long file back into `(trial, trace)` rows.
pub fn read_trials_csv(path: &Path) -> Result<Vec<(usize, IterationTrace)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRIALS_HEADER => {}
        _ => {
            return Err(csv_error(
                path,
                1,
                format!("expected header `{TRIALS_HEADER}`"),
            ))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(csv_error(
                path,
                i + 1,
                format!("expected 6 fields, got {}", f.len()),
            ));
        }
        let bad = |e: String| csv_error(path, i + 1, e);
        rows.push((
            f[0].parse().map_err(|e| bad(format!("trial: {e}")))?,
            IterationTrace {
                k: f[1].parse().map_err(|e| bad(format!("k: {e}")))?,
                samples: f[2].parse().map_err(|e| bad(format!("samples: {e}")))?,
                abs_error: f[3].parse().map_err(|e| bad(format!("abs_error: {e}")))?,
                rel_error: f[4].parse().map_err(|e| bad(format!("rel_error: {e}")))?,
            },
        ));
    }
    Ok(rows)
}

fn noise_fields(noise: &NoiseModel) -> Vec<(String, String)> {
    let mut out = vec![("noise".to_string(), noise.kind.id().to_string())];
    match noise.kind {
        NoiseKind::SymmetrizedPareto { alpha } | NoiseKind::ShiftedPareto { alpha } => {
            out.push(("alpha".into(), alpha.to_string()))
        }
        NoiseKind::Gaussian { sigma } => out.push(("sigma".into(), sigma.to_string())),
        NoiseKind::None => {}
    }
    out.push(("delta".into(), noise.delta.to_string()));
    out.push(("nu".into(), fmt_real(noise.nu)));
    out
}

/// `key = value` lines describing the experiment and the per-seeker warning flags.
pub fn metadata(spec: &ExperimentSpec, result: &ExperimentResult) -> String {
    let mut kv: Vec<(String, String)> = vec![("game".into(), spec.game.to_string())];
    kv.extend(noise_fields(&spec.noise));
    kv.push(("budget".into(), spec.budget.to_string()));
    kv.push(("accounting".into(), spec.accounting.id().into()));
    kv.push(("trials".into(), spec.trials.to_string()));
    kv.push(("seed".into(), spec.base_seed.to_string()));
    kv.push(("error_kind".into(), spec.error_kind.id().into()));
    let x0 = match &spec.x0 {
        Some(x) => x
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(" "),
        None => "0".into(),
    };
    kv.push(("x0".into(), x0));
    let eq = result
        .equilibrium
        .iter()
        .map(|v| format!("{v:.10}"))
        .collect::<Vec<_>>()
        .join(" ");
    kv.push(("equilibrium".into(), eq));
    for (config, res) in spec.seekers.iter().zip(&result.seekers) {
        let s = &config.schedules;
        let p = |k: &str| format!("seeker.{}.{k}", config.label);
        kv.push((p("algo"), config.algorithm.id().into()));
        kv.push((p("step_a"), s.step_a.to_string()));
        kv.push((p("step_b"), s.step_b.to_string()));
        kv.push((p("beta"), s.sample_beta.to_string()));
        kv.push((p("sample_c"), s.sample_c.to_string()));
        kv.push((p("conf_exponent"), s.conf_exponent.to_string()));
        kv.push((p("eta0"), s.eta0.to_string()));
        kv.push((p("rho"), s.rho.to_string()));
        kv.push((p("tau0"), s.clip_tau0.to_string()));
        kv.push((p("clip_p"), s.clip_p.to_string()));
        kv.push((
            p("fixed_m"),
            s.fixed_m.map_or("none".into(), |m| m.to_string()),
        ));
        kv.push((
            p("fixed_step"),
            s.fixed_step.map_or("none".into(), |v| v.to_string()),
        ));
        let corruption = match config.corruption.mode {
            CorruptionMode::None => "none".to_string(),
            CorruptionMode::FixedCount(c) => format!("fixed:{c}"),
            CorruptionMode::Probabilistic(p) => format!("prob:{p}"),
            CorruptionMode::Minority => "minority".to_string(),
        };
        kv.push((p("corruption"), corruption));
        kv.push((
            p("corruption_magnitude"),
            config.corruption.magnitude.to_string(),
        ));
        kv.push((p("final_iteration"), res.final_iteration.to_string()));
        kv.push((
            p("theory_invalid_iterations"),
            res.theory_invalid_iterations.to_string(),
        ));
        if config.algorithm.is_mom() {
            kv.push((p("beta_condition"), res.beta_condition.to_string()));
        }
    }
    kv.into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

/// Writes `<label>.csv`, `trials/<label>.csv` and `metadata.txt` under `dir`.
pub fn write_experiment(
    dir: &Path,
    spec: &ExperimentSpec,
    result: &ExperimentResult,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir.join("trials"))?;
    let mut written = Vec::new();
    for s in &result.seekers {
        let path = dir.join(format!("{}.csv", s.label));
        write_csv(
            &[
                s.curve(Axis::Samples),
                s.curve(Axis::Iterations),
                s.curve(Axis::Final),
            ],
            &path,
        )?;
        written.push(path);
        let path = dir.join("trials").join(format!("{}.csv", s.label));
        fs::write(&path, trials_to_csv(&s.trial_records))?;
        written.push(path);
    }
    let path = dir.join("metadata.txt");
    fs::write(&path, metadata(spec, result))?;
    written.push(path);
    Ok(written)
}

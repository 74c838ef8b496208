//! Command-line front end: `solve-eq`, `run`, `compare` and `verify`.
//!
//! Experiment settings resolve in three layers: preset defaults, then the
//! `--config` file (`key = value` lines, `#` comments), then flags. Each
//! flag `--some-key` has the config key `some_key`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    chung_oracle, fit_envelope, fit_loglog_slope, tail_bound_test, verify_certificate,
    ChungInstance, EnvelopeParams, RATIO_SLOPE_LIMIT,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::game::{analyze, solve_equilibrium, EQUILIBRIUM_TOL};
use crate::harness::{
    read_csv, read_trials_csv, run_experiment, write_experiment, AggregateCurve, Axis, ErrorKind,
    ExperimentResult, ExperimentSpec, GameSpec, CURVE_HEADER, TRIALS_HEADER,
};
use crate::noise::{CorruptionMode, CorruptionModel, NoiseKind, NoiseModel};
use crate::seekers::{Algorithm, BudgetAccounting, Schedules, SeekerConfig};
use crate::svg::{render_loglog, Series};

/// Exit code for failed verifications.
const EXIT_FAIL: u8 = 1;
/// Exit code for usage, validation and I/O errors.
const EXIT_ERROR: u8 = 2;

const GAME_IDS: &str = "benchmark15, benchmark<N>, diag";

/// Non-negative integer that also accepts exact scientific notation (`1e5`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Count(pub u64);

impl FromStr for Count {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if let Ok(v) = s.parse::<u64>() {
            return Ok(Count(v));
        }
        match s.parse::<f64>() {
            Ok(v) if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(63) => Ok(Count(v as u64)),
            _ => Err(format!("`{s}` is not a non-negative integer")),
        }
    }
}

impl fmt::Display for Count {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key} = {value}`: {e}")))
}

macro_rules! settings {
    ($( $(#[$meta:meta])* $field:ident : $ty:ty ),* $(,)?) => {
        #[derive(Debug, Clone, Default, PartialEq, Args)]
        pub struct Settings {
            $( $(#[$meta])* #[arg(long)] pub $field: Option<$ty>, )*
        }

        impl Settings {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => self.$field = Some(parse_value(key, value)?), )*
                    _ => {
                        return Err(Error::Config(format!(
                            "unknown key `{key}` (known keys: {})",
                            Self::KEYS.join(", ")
                        )))
                    }
                }
                Ok(())
            }

            /// Fields set in `over` win.
            pub fn overlay(self, over: Settings) -> Settings {
                Settings { $( $field: over.$field.or(self.$field), )* }
            }
        }
    };
}

settings! {
    /// Preset bundle: fig1, fig2, fig3 or fig4.
    preset: String,
    /// Game id: benchmark15, benchmark<N> or diag.
    game: String,
    n: usize,
    #[arg(allow_hyphen_values = true)]
    a: f64,
    #[arg(allow_hyphen_values = true)]
    r: f64,
    /// Noise: sym-pareto, shifted-pareto, gaussian or none.
    noise: String,
    alpha: f64,
    sigma: f64,
    /// Moment order δ ∈ (1, 2].
    delta: f64,
    /// Override for the certified moment bound ν.
    nu: f64,
    /// Comma-separated seekers: mom, mom_bc, mom_fixed, mom_bc_fixed, gc_sun, clipped_sgda, clipped_seg.
    algo: String,
    budget: Count,
    trials: Count,
    seed: u64,
    /// per-player or total.
    accounting: String,
    /// relative, absolute or squared.
    error_kind: String,
    /// Initial profile: one value for every player, or one per player.
    #[arg(allow_hyphen_values = true)]
    x0: String,
    step_a: f64,
    step_b: f64,
    /// Sample growth exponent β.
    beta: f64,
    sample_c: usize,
    conf_exponent: f64,
    eta0: f64,
    rho: f64,
    tau0: f64,
    clip_p: f64,
    fixed_m: usize,
    fixed_step: f64,
    /// none, minority, fixed:<blocks> or prob:<p>.
    corruption: String,
    #[arg(allow_hyphen_values = true)]
    corruption_magnitude: f64,
    corrupt_baselines: bool,
    /// Output directory.
    out: PathBuf,
}

impl Settings {
    pub fn parse_config(text: &str) -> Result<Settings> {
        let mut s = Settings::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim().replace('-', "_");
            if seen.insert(key.clone(), i + 1).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    i + 1
                )));
            }
            s.set(&key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(s)
    }

    pub fn preset(name: &str) -> Result<Settings> {
        let mut s = Settings {
            noise: Some("sym-pareto".into()),
            alpha: Some(1.8),
            algo: Some("gc_sun,clipped_sgda,clipped_seg,mom,mom_fixed".into()),
            budget: Some(Count(100_000)),
            trials: Some(Count(20)),
            seed: Some(1),
            ..Settings::default()
        };
        match name {
            "fig1" => {}
            "fig2" => s.alpha = Some(1.2),
            "fig3" | "fig4" => {
                s.noise = Some("shifted-pareto".into());
                s.algo = Some("gc_sun,clipped_sgda,clipped_seg,mom,mom_bc,mom_bc_fixed".into());
                s.beta = Some(if name == "fig3" { 2.1 } else { 3.0 });
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset `{name}` (expected fig1, fig2, fig3 or fig4)"
                )))
            }
        }
        s.preset = Some(name.into());
        Ok(s)
    }
}

pub fn parse_game(id: &str, n: Option<usize>, a: Option<f64>, r: Option<f64>) -> Result<GameSpec> {
    let unknown = || Error::Config(format!("unknown game `{id}` (valid ids: {GAME_IDS})"));
    if id == "diag" {
        return Ok(GameSpec::Diagonal {
            n: n.unwrap_or(3),
            a: a.unwrap_or(2.0),
            r: r.unwrap_or(-2.0),
        });
    }
    let rest = id.strip_prefix("benchmark").ok_or_else(unknown)?;
    let from_id = if rest.is_empty() {
        None
    } else {
        Some(rest.parse::<usize>().map_err(|_| unknown())?)
    };
    match (from_id, n) {
        (Some(k), Some(m)) if k != m => {
            Err(Error::Config(format!("game `{id}` conflicts with n = {m}")))
        }
        (Some(k), _) | (None, Some(k)) => Ok(GameSpec::Benchmark { n: k }),
        (None, None) => Ok(GameSpec::Benchmark { n: 15 }),
    }
}

pub fn parse_noise_kind(id: &str, alpha: Option<f64>, sigma: Option<f64>) -> Result<NoiseKind> {
    let kind = match id {
        "sym-pareto" => NoiseKind::SymmetrizedPareto {
            alpha: alpha.unwrap_or(1.8),
        },
        "shifted-pareto" => NoiseKind::ShiftedPareto {
            alpha: alpha.unwrap_or(1.8),
        },
        "gaussian" => NoiseKind::Gaussian {
            sigma: sigma.unwrap_or(1.0),
        },
        "none" => NoiseKind::None,
        _ => {
            return Err(Error::Config(format!(
                "unknown noise `{id}` (expected sym-pareto, shifted-pareto, gaussian or none)"
            )))
        }
    };
    kind.validate()?;
    Ok(kind)
}

/// Default moment order: 1.5 when the tail allows it, else halfway to α.
pub fn default_delta(kind: NoiseKind) -> f64 {
    match kind {
        NoiseKind::SymmetrizedPareto { alpha } | NoiseKind::ShiftedPareto { alpha } => {
            if alpha > 1.5 {
                1.5
            } else {
                0.5 * (1.0 + alpha)
            }
        }
        NoiseKind::Gaussian { .. } | NoiseKind::None => 2.0,
    }
}

pub fn build_noise(kind: NoiseKind, delta: Option<f64>, nu: Option<f64>) -> Result<NoiseModel> {
    if kind == NoiseKind::None {
        return Ok(NoiseModel::none());
    }
    let delta = delta.unwrap_or_else(|| default_delta(kind));
    match nu {
        Some(nu) => {
            if !(nu >= 0.0) {
                return Err(Error::Config(format!("nu must be nonnegative (got {nu})")));
            }
            if !(delta > 1.0 && delta <= 2.0) {
                return Err(Error::Config(format!(
                    "delta must lie in (1, 2] (got {delta})"
                )));
            }
            Ok(NoiseModel { kind, delta, nu })
        }
        None => NoiseModel::certified(kind, delta),
    }
}

pub fn parse_corruption(s: &str, magnitude: f64) -> Result<CorruptionModel> {
    let mode = match s.split_once(':') {
        None if s == "none" => CorruptionMode::None,
        None if s == "minority" => CorruptionMode::Minority,
        Some(("fixed", c)) => CorruptionMode::FixedCount(parse_value("corruption", c)?),
        Some(("prob", p)) => CorruptionMode::Probabilistic(parse_value("corruption", p)?),
        _ => {
            return Err(Error::Config(format!(
                "unknown corruption `{s}` (expected none, minority, fixed:<blocks> or prob:<p>)"
            )))
        }
    };
    let model = CorruptionModel { mode, magnitude };
    model.validate()?;
    Ok(model)
}

fn parse_profile(s: &str, n: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = s
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| parse_value("x0", t))
        .collect::<Result<_>>()?;
    match values.len() {
        1 => Ok(vec![values[0]; n]),
        len if len == n => Ok(values),
        len => Err(Error::Config(format!(
            "x0 has {len} entries for {n} players"
        ))),
    }
}

/// Resolves settings into a validated experiment.
pub fn build_spec(s: &Settings) -> Result<ExperimentSpec> {
    let game = parse_game(s.game.as_deref().unwrap_or("benchmark15"), s.n, s.a, s.r)?;
    let kind = parse_noise_kind(s.noise.as_deref().unwrap_or("sym-pareto"), s.alpha, s.sigma)?;
    let noise = build_noise(kind, s.delta, s.nu)?;

    let defaults = Schedules::default();
    let schedules = Schedules {
        step_a: s.step_a.unwrap_or(defaults.step_a),
        step_b: s.step_b.unwrap_or(defaults.step_b),
        sample_beta: s.beta.unwrap_or(defaults.sample_beta),
        sample_c: s.sample_c.unwrap_or(defaults.sample_c),
        conf_exponent: s.conf_exponent.unwrap_or(defaults.conf_exponent),
        eta0: s.eta0.unwrap_or(defaults.eta0),
        rho: s.rho.unwrap_or(defaults.rho),
        clip_tau0: s.tau0.unwrap_or(defaults.clip_tau0),
        clip_p: s.clip_p.unwrap_or(defaults.clip_p),
        fixed_m: None,
        fixed_step: s.fixed_step.or(defaults.fixed_step),
    };
    let corruption = parse_corruption(
        s.corruption.as_deref().unwrap_or("none"),
        s.corruption_magnitude.unwrap_or(1e9),
    )?;
    let corrupt_baselines = s.corrupt_baselines.unwrap_or(false);

    let algo = s
        .algo
        .as_deref()
        .unwrap_or("gc_sun,clipped_sgda,clipped_seg,mom,mom_fixed");
    let mut seekers = Vec::new();
    for id in algo.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let (base, suffixed) = match id.strip_suffix("_fixed") {
            Some(b) => (b, true),
            None => (id, false),
        };
        let algorithm: Algorithm = base.parse()?;
        let fixed = algorithm.is_mom() && (suffixed || s.fixed_m.is_some());
        if suffixed && !algorithm.is_mom() {
            return Err(Error::Config(format!(
                "`{id}`: only MoM seekers take a fixed sample size"
            )));
        }
        let mut sched = schedules.clone();
        let mut label = algorithm.id().to_string();
        if fixed {
            sched.fixed_m = Some(s.fixed_m.unwrap_or(20));
            label.push_str("_fixed");
        }
        let mut config = SeekerConfig::new(algorithm, sched).with_label(label);
        if algorithm.is_mom() || corrupt_baselines {
            config = config.with_corruption(corruption);
        }
        seekers.push(config);
    }
    let trials = s.trials.map_or(20, |c| c.0);
    let spec = ExperimentSpec {
        x0: s
            .x0
            .as_deref()
            .map(|v| parse_profile(v, game.n_players()))
            .transpose()?,
        game,
        noise,
        seekers,
        budget: s.budget.map_or(100_000, |c| c.0),
        trials: usize::try_from(trials).map_err(|_| Error::Config("trials out of range".into()))?,
        base_seed: s.seed.unwrap_or(1),
        error_kind: s
            .error_kind
            .as_deref()
            .map(ErrorKind::from_str)
            .transpose()?
            .unwrap_or_default(),
        accounting: s
            .accounting
            .as_deref()
            .map(BudgetAccounting::from_str)
            .transpose()?
            .unwrap_or_default(),
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Parser)]
#[command(
    name = "mom-nash",
    version,
    about = "Nash-equilibrium seeking under heavy-tailed gradient noise"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a game's equilibrium and print x*, μ, L and G.
    SolveEq(SolveEqArgs),
    /// Run a multi-trial experiment and write CSVs plus metadata.
    Run(ExperimentArgs),
    /// Like `run`, also plotting error against samples and iterations.
    Compare(ExperimentArgs),
    /// Numerical checks of the estimator and rate theory.
    #[command(subcommand)]
    Verify(VerifyCommand),
}

#[derive(Debug, Args)]
pub struct SolveEqArgs {
    #[arg(long, default_value = "benchmark15")]
    pub game: String,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub a: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub r: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// `key = value` settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run trials on one thread.
    #[arg(long)]
    pub sequential: bool,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Subcommand)]
pub enum VerifyCommand {
    /// Empirical conditional tail bound of the MoM estimate.
    Tail(TailArgs),
    /// Certificate for the Chung-type recursion.
    Chung(ChungArgs),
    /// Rate-envelope check of a stored run.
    Rate(RateArgs),
}

#[derive(Debug, Args)]
pub struct TailArgs {
    #[arg(long, default_value = "sym-pareto")]
    pub noise: String,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long, default_value_t = 200)]
    pub m: usize,
    #[arg(long, default_value_t = 0.05)]
    pub gamma: f64,
    #[arg(long, default_value = "100000")]
    pub trials: Count,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "benchmark15")]
    pub game: String,
    /// Profile to estimate at; defaults to the equilibrium.
    #[arg(long, allow_hyphen_values = true)]
    pub x: Option<String>,
    #[arg(long)]
    pub sequential: bool,
    /// Verdict CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ChungArgs {
    #[arg(long)]
    pub r: f64,
    #[arg(long)]
    pub p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub d: f64,
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 2)]
    pub k0: usize,
    #[arg(long, default_value_t = 1.0)]
    pub y0: f64,
    #[arg(long, default_value = "1000000")]
    pub horizon: Count,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RateArgs {
    /// A per-trial file (`trials/<label>.csv`) or a curve file from a run
    /// with `error_kind = squared`.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub delta: f64,
    #[arg(long)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 0.0)]
    pub zeta: f64,
    /// Final fraction of iterations used for the path constant.
    #[arg(long, default_value_t = 0.5)]
    pub window: f64,
    /// Required range `lo,hi` for the final-decade log-log slope.
    #[arg(long, allow_hyphen_values = true)]
    pub slope_range: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exec_mode(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

pub fn cmd_solve_eq(args: &SolveEqArgs) -> Result<String> {
    let spec = parse_game(&args.game, args.n, args.a, args.r)?;
    let game = spec.build()?;
    let x = solve_equilibrium(&game, EQUILIBRIUM_TOL)?;
    let a = analyze(&game)?;
    let mut out = String::new();
    let _ = writeln!(out, "game = {spec}");
    let xs: Vec<String> = x.iter().map(|v| format!("{v:.6}")).collect();
    let _ = writeln!(out, "x* = [{}]", xs.join(", "));
    let _ = writeln!(out, "mu = {:.6}", a.mu);
    let _ = writeln!(out, "L = {:.6}", a.lipschitz);
    let _ = writeln!(out, "G = {:.6}", a.grad_bound);
    Ok(out)
}

/// Resolves preset, config file and flags into an experiment spec.
pub fn resolve_settings(args: &ExperimentArgs) -> Result<Settings> {
    let file = match &args.config {
        Some(p) => Settings::parse_config(&fs::read_to_string(p)?)?,
        None => Settings::default(),
    };
    let preset = args
        .settings
        .preset
        .clone()
        .or_else(|| file.preset.clone())
        .unwrap_or_else(|| "fig1".into());
    Ok(Settings::preset(&preset)?
        .overlay(file)
        .overlay(args.settings.clone()))
}

fn summary(result: &ExperimentResult) -> String {
    let mut out = String::new();
    for s in &result.seekers {
        let _ = writeln!(
            out,
            "{:<14} iterations {:>7}  mean final error {:.6e}",
            s.label,
            s.final_iteration,
            s.mean_final()
        );
    }
    out
}

pub fn cmd_run(args: &ExperimentArgs, plots: bool) -> Result<String> {
    let settings = resolve_settings(args)?;
    let spec = build_spec(&settings)?;
    let result = run_experiment(&spec, exec_mode(args.sequential))?;
    let dir = settings.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let mut written = write_experiment(&dir, &spec, &result)?;
    if plots {
        for axis in [Axis::Samples, Axis::Iterations] {
            let path = dir.join(format!("{}.svg", axis.id()));
            fs::write(&path, plot_axis(&result, axis, spec.error_kind))?;
            written.push(path);
        }
    }
    let mut out = summary(&result);
    for p in written {
        let _ = writeln!(out, "wrote {}", p.display());
    }
    Ok(out)
}

fn plot_axis(result: &ExperimentResult, axis: Axis, kind: ErrorKind) -> String {
    let curves: Vec<AggregateCurve> = result.seekers.iter().map(|s| s.curve(axis)).collect();
    let series: Vec<Series<'_>> = result
        .seekers
        .iter()
        .zip(&curves)
        .map(|(s, c)| Series {
            label: &s.label,
            curve: c,
        })
        .collect();
    let x_label = match axis {
        Axis::Samples => "samples consumed",
        _ => "iteration",
    };
    render_loglog(&series, x_label, &format!("{} error", kind.id()))
}

/// One verdict row per check.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub check: String,
    pub value: f64,
    pub threshold: f64,
    /// `None` marks an informational row.
    pub pass: Option<bool>,
}

pub fn verdict_csv(rows: &[Verdict]) -> String {
    let mut out = String::from("check,value,threshold,pass\n");
    for v in rows {
        let pass = match v.pass {
            Some(true) => "pass",
            Some(false) => "fail",
            None => "info",
        };
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{pass}",
            v.check, v.value, v.threshold
        );
    }
    out
}

fn all_pass(rows: &[Verdict]) -> bool {
    rows.iter().all(|v| v.pass != Some(false))
}

pub fn cmd_verify_tail(args: &TailArgs) -> Result<Vec<Verdict>> {
    let kind = parse_noise_kind(&args.noise, args.alpha, args.sigma)?;
    let noise = build_noise(kind, args.delta, args.nu)?;
    let spec = parse_game(&args.game, None, None, None)?;
    let game = spec.build()?;
    let x = match &args.x {
        Some(v) => parse_profile(v, spec.n_players())?,
        None => solve_equilibrium(&game, EQUILIBRIUM_TOL)?,
    };
    let trials =
        usize::try_from(args.trials.0).map_err(|_| Error::Config("trials out of range".into()))?;
    let report = tail_bound_test(
        &game,
        &x,
        &noise,
        args.m,
        args.gamma,
        trials,
        args.seed,
        exec_mode(args.sequential),
    )?;
    Ok(vec![
        Verdict {
            check: "violation_rate".into(),
            value: report.violation_rate,
            threshold: report.bound,
            pass: Some(report.pass),
        },
        Verdict {
            check: "deviation_threshold".into(),
            value: report.threshold,
            threshold: 0.0,
            pass: None,
        },
        Verdict {
            check: "nu".into(),
            value: noise.nu,
            threshold: 0.0,
            pass: None,
        },
    ])
}

pub fn cmd_verify_chung(args: &ChungArgs) -> Result<Vec<Verdict>> {
    let inst = ChungInstance {
        r: args.r,
        p: args.p,
        d: args.d,
        tau: args.tau,
        k0: args.k0,
        y0: args.y0,
    };
    let horizon = usize::try_from(args.horizon.0)
        .map_err(|_| Error::Config("horizon out of range".into()))?;
    let cert = chung_oracle(&inst, horizon)?;
    let ok = verify_certificate(&inst, &cert);
    Ok(vec![
        Verdict {
            check: "certified_a".into(),
            value: cert.certified_a,
            threshold: 0.0,
            pass: Some(ok),
        },
        Verdict {
            check: "certified_k".into(),
            value: cert.certified_k as f64,
            threshold: horizon as f64,
            pass: None,
        },
    ])
}

/// Mean squared error per iteration from a per-trial or curve file.
pub fn load_squared_errors(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path)?;
    let header = text.lines().next().unwrap_or("").trim();
    if header == TRIALS_HEADER {
        let rows = read_trials_csv(path)?;
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (_, t) in rows {
            let e = acc.entry(t.k).or_insert((0.0, 0));
            e.0 += t.sq_error();
            e.1 += 1;
        }
        let full = acc.values().map(|v| v.1).max().unwrap_or(0);
        Ok(acc
            .into_iter()
            .filter(|(_, (_, c))| *c == full)
            .map(|(k, (s, c))| (k, s / c as f64))
            .collect())
    } else if header == CURVE_HEADER {
        let curves = read_csv(path)?;
        let c = curves
            .into_iter()
            .find(|c| c.axis == Axis::Iterations)
            .ok_or_else(|| Error::Config(format!("{}: no iteration-axis curve", path.display())))?;
        Ok(c.grid
            .iter()
            .map(|&k| k as usize)
            .zip(c.mean_error)
            .collect())
    } else {
        Err(Error::Csv {
            path: path.display().to_string(),
            line: 1,
            reason: "unrecognised header".into(),
        })
    }
}

pub fn cmd_verify_rate(args: &RateArgs) -> Result<Vec<Verdict>> {
    let points = load_squared_errors(&args.from)?;
    let params = EnvelopeParams {
        delta: args.delta,
        beta: args.beta,
        rho: args.rho,
        zeta: args.zeta,
    };
    let fit = fit_envelope(&points, params, args.window)?;
    let slope = fit_loglog_slope(&points, 0.9)?;
    let mut rows = vec![
        Verdict {
            check: "envelope_ratio_slope".into(),
            value: fit.ratio_slope,
            threshold: RATIO_SLOPE_LIMIT,
            pass: Some(fit.satisfied),
        },
        Verdict {
            check: "fitted_a".into(),
            value: fit.envelope.fitted_a,
            threshold: 0.0,
            pass: None,
        },
    ];
    match &args.slope_range {
        Some(range) => {
            let (lo, hi) = range
                .split_once(',')
                .ok_or_else(|| Error::Config("slope_range must be `lo,hi`".into()))?;
            let lo: f64 = parse_value("slope_range", lo.trim())?;
            let hi: f64 = parse_value("slope_range", hi.trim())?;
            rows.push(Verdict {
                check: "loglog_slope_min".into(),
                value: slope,
                threshold: lo,
                pass: Some(slope >= lo),
            });
            rows.push(Verdict {
                check: "loglog_slope_max".into(),
                value: slope,
                threshold: hi,
                pass: Some(slope <= hi),
            });
        }
        None => rows.push(Verdict {
            check: "loglog_slope".into(),
            value: slope,
            threshold: 0.0,
            pass: None,
        }),
    }
    Ok(rows)
}

fn finish_verdict(rows: Result<Vec<Verdict>>, out: Option<&Path>) -> Result<(String, bool)> {
    let rows = rows?;
    let csv = verdict_csv(&rows);
    if let Some(p) = out {
        fs::write(p, &csv)?;
    }
    Ok((csv, all_pass(&rows)))
}

/// Runs a parsed command; `Ok(false)` means a verification failed.
pub fn execute(cli: &Cli) -> Result<(String, bool)> {
    match &cli.command {
        Command::SolveEq(a) => Ok((cmd_solve_eq(a)?, true)),
        Command::Run(a) => Ok((cmd_run(a, false)?, true)),
        Command::Compare(a) => Ok((cmd_run(a, true)?, true)),
        Command::Verify(VerifyCommand::Tail(a)) => {
            finish_verdict(cmd_verify_tail(a), a.out.as_deref())
        }
        Command::Verify(VerifyCommand::Chung(a)) => {
            finish_verdict(cmd_verify_chung(a), a.out.as_deref())
        }
        Command::Verify(VerifyCommand::Rate(a)) => {
            finish_verdict(cmd_verify_rate(a), a.out.as_deref())
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR } else { 0 });
        }
    };
    match execute(&cli) {
        Ok((out, pass)) => {
            print!("{out}");
            if pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAIL)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

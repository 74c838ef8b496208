//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.
//!
//! Run with `cargo test -p mom-nash --test acceptance`.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mom_nash::analysis::{
    chung_oracle, fit_envelope, fit_loglog_slope, tail_bound_test, verify_certificate,
};
use mom_nash::analysis::{ChungInstance, EnvelopeParams};
use mom_nash::cli::{build_spec, Settings};
use mom_nash::estimators::{mom_estimate, plan_blocks};
use mom_nash::exec::Execution;
use mom_nash::game::{analyze, benchmark_game, solve_equilibrium, EQUILIBRIUM_TOL};
use mom_nash::harness::{run_experiment, AggregateCurve, ErrorKind, ExperimentSpec, GameSpec};
use mom_nash::noise::{
    corrupt_in_place, CorruptionMode, CorruptionModel, NoiseKind, NoiseModel, RngStream,
};
use mom_nash::seekers::{
    rate_step_coefficient, run_seeker, Algorithm, BudgetAccounting, RunSetup, Schedules,
    SeekerConfig,
};

const BIN: &str = env!("CARGO_BIN_EXE_mom-nash");

/// Reference equilibrium of the 15-player benchmark, four decimals.
const REFERENCE_EQ: [f64; 15] = [
    0.1292, 0.2523, 0.3697, 0.4817, 0.5887, 0.6911, 0.7891, 0.8831, 0.9732, 1.0597, 1.1428, 1.2227,
    1.2996, 1.3737, 1.4450,
];
const REFERENCE_MU: f64 = 1.8166;
const STAT_SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn binary(args: &[&str]) -> (bool, String) {
    let out = Command::new(BIN).args(args).output().expect("binary runs");
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
    )
}

fn equilibrium_reproduction() -> Outcome {
    let (ok, stdout) = binary(&["solve-eq", "--game", "benchmark15"]);
    let field = |name: &str| {
        stdout
            .lines()
            .find_map(|l| l.strip_prefix(name))
            .map(|v| v.trim().to_string())
            .unwrap_or_default()
    };
    let x: Vec<f64> = field("x* = ")
        .trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .filter_map(|v| v.trim().parse().ok())
        .collect();
    let mu: f64 = field("mu = ").parse().unwrap_or(f64::NAN);
    if !ok || x.len() != 15 {
        return outcome(false, format!("unparseable output: {stdout}"));
    }
    let max_err = x
        .iter()
        .zip(REFERENCE_EQ)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    outcome(
        max_err <= 5e-4 && (mu - REFERENCE_MU).abs() <= 1e-3,
        format!("max |x - reference| = {max_err:.2e}, mu = {mu:.6}"),
    )
}

/// Partition into consecutive blocks, average each, sort, take the middle.
fn brute_force_mom(samples: &[f64], gamma: f64) -> f64 {
    let m = samples.len();
    let b = ((8.0 * (0.125 + (1.0 / gamma).ln()))
        .min(m as f64 / 2.0)
        .floor() as usize)
        .max(1);
    let s = m / b;
    let mut means: Vec<f64> = (0..b)
        .map(|j| {
            let mut sum = 0.0;
            for v in &samples[j * s..(j + 1) * s] {
                sum += v;
            }
            sum / s as f64
        })
        .collect();
    means.sort_by(|a, c| a.partial_cmp(c).unwrap());
    if b % 2 == 1 {
        means[b / 2]
    } else {
        (means[b / 2 - 1] + means[b / 2]) / 2.0
    }
}

fn mom_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let m = rng.random_range(2..=400usize);
        let gamma = 10f64.powf(rng.random_range(-6.0..-0.05));
        let samples: Vec<f64> = (0..m)
            .map(|_| rng.random_range(-1e3..1e3) * rng.random::<f64>().powi(4))
            .collect();
        let plan = plan_blocks(m, gamma).unwrap();
        let got = mom_estimate(&samples, &plan).unwrap().estimate;
        if got.to_bits() != brute_force_mom(&samples, gamma).to_bits() {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches in 10000 instances"),
    )
}

fn tail_bound() -> Outcome {
    let game = benchmark_game(15).unwrap();
    let x = solve_equilibrium(&game, EQUILIBRIUM_TOL).unwrap();
    let configs = [
        (NoiseKind::Gaussian { sigma: 1.0 }, 2.0),
        (NoiseKind::SymmetrizedPareto { alpha: 1.8 }, 1.5),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (kind, delta) in configs {
        let noise = NoiseModel::certified(kind, delta).unwrap();
        for gamma in [0.05, 0.01] {
            let r = tail_bound_test(
                &game,
                &x,
                &noise,
                200,
                gamma,
                100_000,
                17,
                Execution::Parallel,
            )
            .unwrap();
            pass &= r.pass;
            parts.push(format!(
                "{}/{gamma}: {:.2e} <= {:.3}",
                kind.id(),
                r.violation_rate,
                r.bound
            ));
        }
    }
    outcome(pass, parts.join("; "))
}

fn breakdown_robustness() -> Outcome {
    let mut rng = RngStream::new(99, 0);
    let minority = CorruptionModel {
        mode: CorruptionMode::Minority,
        magnitude: 1e9,
    };
    let mut escapes = 0;
    for _ in 0..1000 {
        let m = 10 + (rng.uniform_open_closed() * 490.0) as usize;
        let gamma = 10f64.powf(-0.5 - 5.0 * rng.uniform_open_closed());
        let plan = plan_blocks(m, gamma).unwrap();
        let clean: Vec<f64> = (0..m).map(|_| rng.standard_normal()).collect();
        let reference = mom_estimate(&clean, &plan).unwrap().block_means;
        let lo = reference.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut dirty = clean.clone();
        corrupt_in_place(&mut dirty[..plan.m_used], &minority, &mut rng, plan.s).unwrap();
        let est = mom_estimate(&dirty, &plan).unwrap().estimate;
        if !(lo <= est && est <= hi) {
            escapes += 1;
        }
    }

    let game = benchmark_game(15).unwrap();
    let eq = solve_equilibrium(&game, EQUILIBRIUM_TOL).unwrap();
    let x0 = vec![0.0; 15];
    let setup = RunSetup {
        game: &game,
        equilibrium: &eq,
        noise: NoiseModel::none(),
        x0: &x0,
        budget: 100_000,
        accounting: BudgetAccounting::PerPlayer,
    };
    let config = SeekerConfig::new(Algorithm::Mom, Schedules::default()).with_corruption(minority);
    let run = run_seeker(&setup, &config, &mut RngStream::new(5, 0)).unwrap();
    let final_err = run.traces.last().unwrap().abs_error;
    outcome(
        escapes == 0 && final_err < 1e-2,
        format!("{escapes} escapes in 1000 instances; corrupted run final error {final_err:.2e}"),
    )
}

fn preset_spec(preset: &str, overrides: Settings) -> ExperimentSpec {
    build_spec(&Settings::preset(preset).unwrap().overlay(overrides)).unwrap()
}

fn symmetric_comparison() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (preset, alpha) in [("fig1", 1.8), ("fig2", 1.2)] {
        for seed in STAT_SEEDS {
            let spec = preset_spec(
                preset,
                Settings {
                    algo: Some("gc_sun,mom".into()),
                    seed: Some(seed),
                    ..Settings::default()
                },
            );
            let res = run_experiment(&spec, Execution::Parallel).unwrap();
            let gc = res.seeker("gc_sun").unwrap().mean_final();
            let mom = res.seeker("mom").unwrap().mean_final();
            pass &= mom < gc;
            if seed == STAT_SEEDS[0] {
                parts.push(format!("alpha {alpha}: mom {mom:.2e} vs gc {gc:.2e}"));
            }
        }
    }
    parts.push(format!("seeds {STAT_SEEDS:?}"));
    outcome(pass, parts.join("; "))
}

fn value_at(curve: &AggregateCurve, k: u64) -> f64 {
    let j = curve
        .grid
        .iter()
        .position(|&g| g == k)
        .expect("grid holds every k up to 100");
    curve.mean_error[j]
}

fn bias_correction() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in STAT_SEEDS {
        let beta3 = preset_spec(
            "fig4",
            Settings {
                algo: Some("mom,mom_bc".into()),
                seed: Some(seed),
                ..Settings::default()
            },
        );
        let beta21 = preset_spec(
            "fig3",
            Settings {
                algo: Some("mom_bc".into()),
                seed: Some(seed),
                ..Settings::default()
            },
        );
        let r3 = run_experiment(&beta3, Execution::Parallel).unwrap();
        let r21 = run_experiment(&beta21, Execution::Parallel).unwrap();
        let mom = r3.seeker("mom").unwrap();
        let bc3 = r3.seeker("mom_bc").unwrap();
        let bc21 = r21.seeker("mom_bc").unwrap();
        let k = bc3.final_iteration as u64;
        let (e_mom, e_bc3) = (value_at(&mom.iterations, k), value_at(&bc3.iterations, k));
        let e_bc21 = value_at(&bc21.iterations, k);
        pass &= e_bc3 <= e_mom && e_bc3 <= e_bc21;
        if seed == STAT_SEEDS[0] {
            parts.push(format!(
                "k = {k}: mom_bc {e_bc3:.2e} vs mom {e_mom:.2e}; beta 2.1 mom_bc {e_bc21:.2e} (own final k = {}: {:.2e})",
                bc21.final_iteration,
                bc21.mean_final()
            ));
        }
    }
    parts.push(format!("seeds {STAT_SEEDS:?}"));
    outcome(pass, parts.join("; "))
}

fn rate_shape() -> Outcome {
    let game = benchmark_game(15).unwrap();
    let mu = analyze(&game).unwrap().mu;
    let iterations: u64 = 1000;
    let schedules = Schedules {
        step_a: 1.0,
        step_b: rate_step_coefficient(mu, 1.0, 2.0),
        sample_beta: 1.0,
        ..Schedules::default()
    };
    let spec = ExperimentSpec {
        game: GameSpec::Benchmark { n: 15 },
        noise: NoiseModel::certified(NoiseKind::Gaussian { sigma: 1.0 }, 2.0).unwrap(),
        seekers: vec![SeekerConfig::new(Algorithm::Mom, schedules)],
        // Per-player cost of iterations 0..K is 1 + 2 + ... + K.
        budget: iterations * (iterations + 1) / 2,
        trials: 20,
        base_seed: 1,
        error_kind: ErrorKind::Squared,
        accounting: BudgetAccounting::PerPlayer,
        x0: None,
    };
    let res = run_experiment(&spec, Execution::Parallel).unwrap();
    let curve = &res.seekers[0].iterations;
    let points: Vec<(usize, f64)> = curve
        .grid
        .iter()
        .map(|&k| k as usize)
        .zip(curve.mean_error.iter().copied())
        .collect();
    let slope = fit_loglog_slope(&points, 0.9).unwrap();
    let fit = fit_envelope(&points, EnvelopeParams::plain(2.0, 1.0), 0.5).unwrap();
    let samples = &res.seekers[0].samples;
    let sample_points: Vec<(usize, f64)> = samples
        .grid
        .iter()
        .map(|&c| c as usize)
        .zip(samples.mean_error.iter().copied())
        .collect();
    let sample_slope = fit_loglog_slope(&sample_points, 0.9).unwrap();
    outcome(
        (-1.35..=-0.70).contains(&slope) && fit.satisfied,
        format!(
            "K = {}, slope {slope:.3} (need [-1.35, -0.70]); envelope ratio slope {:.3} (<= 0.1: {}); sample-axis slope {sample_slope:.3}",
            res.seekers[0].final_iteration, fit.ratio_slope, fit.satisfied
        ),
    )
}

fn chung_certificate() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for tau in [0.0, 1.0] {
        let inst = ChungInstance {
            r: 2.0,
            p: 1.0,
            d: 1.0,
            tau,
            k0: 2,
            y0: 1.0,
        };
        let cert = chung_oracle(&inst, 1_000_000).unwrap();
        let ok = verify_certificate(&inst, &cert);
        pass &= ok;
        parts.push(format!(
            "tau {tau}: A = {:.4}, K = {}",
            cert.certified_a, cert.certified_k
        ));
    }
    outcome(pass, parts.join("; "))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let commands: Vec<Vec<String>> = vec![
        "run --algo mom,mom_bc,gc_sun,clipped_sgda,clipped_seg --trials 3 --budget 20000 --seed 7"
            .into(),
        "compare --preset fig3 --trials 2 --budget 5000 --seed 3".into(),
        "verify tail --noise sym-pareto --alpha 1.8 --delta 1.5 --m 200 --gamma 0.05 --trials 2000"
            .into(),
        "verify chung --r 2 --p 1 --tau 1 --d 1 --horizon 1e5".into(),
    ]
    .into_iter()
    .map(|c: String| c.split(' ').map(String::from).collect())
    .collect();
    let mut compared = 0;
    for (i, cmd) in commands.iter().enumerate() {
        let mut snapshots = Vec::new();
        for rep in 0..2 {
            let dir = root.join(format!("c{i}-{rep}"));
            fs::create_dir_all(&dir).unwrap();
            let mut args = cmd.clone();
            if cmd[0] == "verify" {
                args.extend([
                    "--out".into(),
                    dir.join("verdict.csv").display().to_string(),
                ]);
            } else {
                args.extend(["--out".into(), dir.display().to_string()]);
            }
            let arg_refs: Vec<&str> = args.iter().map(String::as_str).collect();
            let (ok, _) = binary(&arg_refs);
            if !ok {
                return outcome(false, format!("`{}` failed", cmd.join(" ")));
            }
            snapshots.push(dir_bytes(&dir));
        }
        if snapshots[0] != snapshots[1] || snapshots[0].is_empty() {
            return outcome(false, format!("`{}` differs between runs", cmd.join(" ")));
        }
        compared += snapshots[0].len();
    }

    let trials = root.join("c0-0").join("trials").join("mom.csv");
    let rate = |rep: usize| {
        let out = root.join(format!("rate{rep}.csv"));
        let t = trials.display().to_string();
        let o = out.display().to_string();
        binary(&[
            "verify", "rate", "--from", &t, "--delta", "2", "--beta", "1", "--out", &o,
        ]);
        fs::read(out).unwrap_or_default()
    };
    let (a, b) = (rate(0), rate(1));
    let same = !a.is_empty() && a == b;
    outcome(
        same,
        format!(
            "{} output files byte-identical across repeated runs",
            compared + usize::from(same)
        ),
    )
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            id: 1,
            name: "equilibrium reproduction",
            limit: Duration::from_secs(1),
            run: equilibrium_reproduction,
        },
        Criterion {
            id: 2,
            name: "MoM oracle equivalence",
            limit: Duration::from_secs(10),
            run: mom_oracle_equivalence,
        },
        Criterion {
            id: 3,
            name: "empirical tail bound",
            limit: Duration::from_secs(120),
            run: tail_bound,
        },
        Criterion {
            id: 4,
            name: "breakdown robustness",
            limit: Duration::from_secs(60),
            run: breakdown_robustness,
        },
        Criterion {
            id: 5,
            name: "symmetric-noise comparison",
            limit: Duration::from_secs(300),
            run: symmetric_comparison,
        },
        Criterion {
            id: 6,
            name: "bias correction",
            limit: Duration::from_secs(600),
            run: bias_correction,
        },
        Criterion {
            id: 7,
            name: "rate shape",
            limit: Duration::from_secs(300),
            run: rate_shape,
        },
        Criterion {
            id: 8,
            name: "recursion certificate",
            limit: Duration::from_secs(5),
            run: chung_certificate,
        },
        Criterion {
            id: 9,
            name: "determinism",
            limit: Duration::from_secs(600),
            run: determinism,
        },
    ];
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for c in criteria
        .iter()
        .filter(|c| filter.is_empty() || filter.contains(&c.id))
    {
        let start = Instant::now();
        let o = (c.run)();
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.limit;
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "{} [{}] {}: {} ({:.2}s, limit {}s{})",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            o.detail,
            elapsed.as_secs_f64(),
            c.limit.as_secs(),
            if in_time { "" } else { ", over time" }
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}

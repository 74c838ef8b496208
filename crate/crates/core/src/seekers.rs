//! Projected stochastic Nash-equilibrium seekers.
//!
//! Five update rules share one runner:
//!
//! * `mom`: per-player median-of-means gradient, projected step `α_k`.
//! * `mom_bc`: as `mom`, blending the median with the block-mean average by `η_k`.
//! * `gc_sun`: one sample per player, scalar clipping at `τ_k`, projected step `α_k`.
//! * `clipped_sgda`: whole pseudo-gradient vector clipped at `τ_k`, constant step.
//! * `clipped_seg`: clipped extragradient with two independent draws per iteration.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::estimators::{
    block_means_into, clip_in_place, clip_scalar, median_in_place, plan_blocks, BlockPlan,
};
use crate::game::Game;
use crate::noise::{corrupt_in_place, CorruptionModel, NoiseModel, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    Mom,
    MomBc,
    GcSun,
    ClippedSgda,
    ClippedSeg,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::GcSun,
        Algorithm::ClippedSgda,
        Algorithm::ClippedSeg,
        Algorithm::Mom,
        Algorithm::MomBc,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Algorithm::Mom => "mom",
            Algorithm::MomBc => "mom_bc",
            Algorithm::GcSun => "gc_sun",
            Algorithm::ClippedSgda => "clipped_sgda",
            Algorithm::ClippedSeg => "clipped_seg",
        }
    }

    pub fn is_mom(&self) -> bool {
        matches!(self, Algorithm::Mom | Algorithm::MomBc)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| {
                invalid(
                    "algo",
                    format!("unknown algorithm `{s}` (expected one of mom, mom_bc, gc_sun, clipped_sgda, clipped_seg)"),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedules {
    /// Step exponent `a` in `α_k = b (k+1)^{−a}`.
    pub step_a: f64,
    /// Step coefficient `b`.
    pub step_b: f64,
    /// Sample growth exponent `β` in `m_k = c ⌈(k+1)^β⌉`.
    pub sample_beta: f64,
    pub sample_c: usize,
    /// `γ_k = (k+1)^{−conf_exponent}`.
    pub conf_exponent: f64,
    pub eta0: f64,
    pub rho: f64,
    pub clip_tau0: f64,
    pub clip_p: f64,
    pub fixed_m: Option<usize>,
    /// Constant step of the clipped SGDA/SEG baselines.
    pub fixed_step: Option<f64>,
}

impl Default for Schedules {
    /// The simulation settings of the reference experiments.
    fn default() -> Self {
        Self {
            step_a: 1.0,
            step_b: 1.0,
            sample_beta: 1.0,
            sample_c: 1,
            conf_exponent: 2.0,
            eta0: 1.0,
            rho: 0.1,
            clip_tau0: 20.0,
            clip_p: 0.2,
            fixed_m: None,
            fixed_step: Some(0.005),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub alpha: f64,
    pub m: usize,
    pub gamma: f64,
    pub eta: f64,
    pub tau: f64,
}

/// `⌈v⌉`, treating values within rounding noise of an integer as that integer.
fn ceil_tolerant(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= 1e-9 * r.max(1.0) {
        r
    } else {
        v.ceil()
    }
}

impl Schedules {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_a > 0.0 && self.step_a <= 1.0) {
            return Err(invalid(
                "step_a",
                format!("must lie in (0, 1] (got {})", self.step_a),
            ));
        }
        let positive = [
            ("step_b", self.step_b),
            ("sample_beta", self.sample_beta),
            ("conf_exponent", self.conf_exponent),
            ("rho", self.rho),
            ("clip_tau0", self.clip_tau0),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(name, format!("must be positive (got {v})")));
            }
        }
        if self.sample_c == 0 {
            return Err(invalid("sample_c", "must be a positive integer"));
        }
        if !(self.eta0 >= 0.0) || !self.eta0.is_finite() {
            return Err(invalid(
                "eta0",
                format!("must be nonnegative (got {})", self.eta0),
            ));
        }
        if !self.clip_p.is_finite() {
            return Err(invalid("clip_p", "must be finite"));
        }
        if self.fixed_m == Some(0) {
            return Err(invalid("fixed_m", "must be positive"));
        }
        if let Some(step) = self.fixed_step {
            if !(step > 0.0) || !step.is_finite() {
                return Err(invalid(
                    "fixed_step",
                    format!("must be positive (got {step})"),
                ));
            }
        }
        Ok(())
    }

    pub fn values(&self, k: usize) -> ScheduleValues {
        let t = (k + 1) as f64;
        let m = match self.fixed_m {
            Some(m) => m,
            None => self.sample_c * ceil_tolerant(t.powf(self.sample_beta)) as usize,
        };
        ScheduleValues {
            alpha: self.step_b * t.powf(-self.step_a),
            m,
            gamma: t.powf(-self.conf_exponent),
            eta: (self.eta0 * t.powf(-self.rho)).min(1.0),
            tau: self.clip_tau0 * t.powf(self.clip_p),
        }
    }
}

pub fn schedule_values(s: &Schedules, k: usize) -> ScheduleValues {
    s.values(k)
}

/// Step coefficient `b` with `μ b` half a unit above `max{1, 2β(δ−1)/δ}`.
pub fn rate_step_coefficient(mu: f64, beta: f64, delta: f64) -> f64 {
    (1f64.max(2.0 * beta * (delta - 1.0) / delta) + 0.5) / mu
}

/// Block plan for one iteration; falls back to a single block when `m < 2`
/// or `γ ≥ 1`, where the block rule yields `b = 1` anyway.
pub fn plan_for_iteration(m: usize, gamma: f64) -> Result<BlockPlan> {
    if m == 0 {
        return Err(invalid("m", "sample count must be positive"));
    }
    if m < 2 || gamma >= 1.0 {
        return Ok(BlockPlan::single(m, gamma.min(1.0)));
    }
    plan_blocks(m, gamma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeekerConfig {
    pub label: String,
    pub algorithm: Algorithm,
    pub schedules: Schedules,
    pub corruption: CorruptionModel,
}

impl SeekerConfig {
    pub fn new(algorithm: Algorithm, schedules: Schedules) -> Self {
        Self {
            label: algorithm.id().to_string(),
            algorithm,
            schedules,
            corruption: CorruptionModel::none(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_corruption(mut self, corruption: CorruptionModel) -> Self {
        self.corruption = corruption;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.schedules.validate()?;
        self.corruption.validate()?;
        if matches!(
            self.algorithm,
            Algorithm::ClippedSgda | Algorithm::ClippedSeg
        ) && self.schedules.fixed_step.is_none()
        {
            return Err(invalid(
                "fixed_step",
                format!("{} needs a constant step", self.algorithm),
            ));
        }
        Ok(())
    }

    /// Per-player samples charged for iteration `k`.
    pub fn per_player_cost(&self, k: usize) -> usize {
        match self.algorithm {
            Algorithm::Mom | Algorithm::MomBc => self.schedules.values(k).m,
            Algorithm::GcSun | Algorithm::ClippedSgda => 1,
            Algorithm::ClippedSeg => 2,
        }
    }

    /// Whether the sample growth meets `β(δ − 1) > 1`, required by the
    /// bias-corrected variant. Fixed sample sizes never do.
    pub fn beta_condition_holds(&self, delta: f64) -> bool {
        self.schedules.fixed_m.is_none() && self.schedules.sample_beta * (delta - 1.0) > 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BudgetAccounting {
    /// Budget counts samples drawn by each player.
    #[default]
    PerPlayer,
    /// Budget counts samples summed over all players.
    Total,
}

impl BudgetAccounting {
    pub fn id(&self) -> &'static str {
        match self {
            BudgetAccounting::PerPlayer => "per-player",
            BudgetAccounting::Total => "total",
        }
    }

    pub fn charge(&self, per_player: usize, n_players: usize) -> u64 {
        match self {
            BudgetAccounting::PerPlayer => per_player as u64,
            BudgetAccounting::Total => (per_player * n_players) as u64,
        }
    }
}

impl FromStr for BudgetAccounting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-player" | "per_player" => Ok(BudgetAccounting::PerPlayer),
            "total" => Ok(BudgetAccounting::Total),
            _ => Err(invalid(
                "accounting",
                format!("expected per-player or total (got `{s}`)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationTrace {
    /// Number of completed updates.
    pub k: usize,
    /// Cumulative samples charged after `k` updates.
    pub samples: u64,
    pub abs_error: f64,
    pub rel_error: f64,
}

impl IterationTrace {
    pub fn sq_error(&self) -> f64 {
        self.abs_error * self.abs_error
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunFlags {
    /// Iterations whose block plan missed the sample condition of the tail bound.
    pub theory_invalid_iterations: usize,
    pub last_theory_invalid_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrajectory {
    pub traces: Vec<IterationTrace>,
    pub final_x: Vec<f64>,
    pub flags: RunFlags,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Raw samples drawn summed over players.
    pub samples_drawn: usize,
    pub theory_valid: bool,
}

/// Reusable buffers for one seeker run.
struct Workspace {
    noise: Vec<f64>,
    grads: Vec<f64>,
    means: Vec<f64>,
    vector: Vec<f64>,
    probe: Vec<f64>,
    next: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            noise: Vec::new(),
            grads: Vec::new(),
            means: Vec::new(),
            vector: vec![0.0; n],
            probe: vec![0.0; n],
            next: vec![0.0; n],
        }
    }
}

/// One configured seeker bound to a game and a noise model.
pub struct Seeker<'a> {
    game: &'a dyn Game,
    config: &'a SeekerConfig,
    noise: NoiseModel,
    ws: Workspace,
}

impl<'a> Seeker<'a> {
    pub fn new(game: &'a dyn Game, config: &'a SeekerConfig, noise: NoiseModel) -> Result<Self> {
        config.validate()?;
        noise.kind.validate()?;
        Ok(Self {
            game,
            config,
            noise,
            ws: Workspace::new(game.n_players()),
        })
    }

    /// Advances `x` by one update of the configured algorithm.
    pub fn step(&mut self, x: &mut [f64], k: usize, rng: &mut RngStream) -> Result<StepOutcome> {
        self.game.constraint().check_dim(x.len())?;
        let outcome = match self.config.algorithm {
            Algorithm::Mom => self.mom_step(x, k, rng, false)?,
            Algorithm::MomBc => self.mom_step(x, k, rng, true)?,
            Algorithm::GcSun => self.gc_step(x, k, rng)?,
            Algorithm::ClippedSgda => self.sgda_step(x, k, rng)?,
            Algorithm::ClippedSeg => self.seg_step(x, k, rng)?,
        };
        x.copy_from_slice(&self.ws.next);
        Ok(outcome)
    }

    fn mom_step(
        &mut self,
        x: &[f64],
        k: usize,
        rng: &mut RngStream,
        bias_corrected: bool,
    ) -> Result<StepOutcome> {
        let sv = self.config.schedules.values(k);
        let plan = plan_for_iteration(sv.m, sv.gamma)?;
        let n = self.game.n_players();
        let ws = &mut self.ws;
        ws.noise.resize(sv.m, 0.0);
        for i in 0..n {
            self.noise.fill(rng, &mut ws.noise);
            self.game.sample_gradients(i, x, &ws.noise, &mut ws.grads);
            if self.config.corruption.is_active() {
                corrupt_in_place(
                    &mut ws.grads[..plan.m_used],
                    &self.config.corruption,
                    rng,
                    plan.s,
                )?;
            }
            block_means_into(&ws.grads, &plan, &mut ws.means)?;
            let estimate = if bias_corrected {
                let mean = ws.means.iter().sum::<f64>() / ws.means.len() as f64;
                let med = median_in_place(&mut ws.means)?;
                (1.0 - sv.eta) * med + sv.eta * mean
            } else {
                median_in_place(&mut ws.means)?
            };
            ws.next[i] = self
                .game
                .constraint()
                .clamp_component(i, x[i] - sv.alpha * estimate);
        }
        Ok(StepOutcome {
            samples_drawn: n * sv.m,
            theory_valid: plan.theory_valid,
        })
    }

    /// One noisy pseudo-gradient sample per player at `at`, written to `out`.
    fn sampled_vector(
        game: &dyn Game,
        noise: &NoiseModel,
        corruption: &CorruptionModel,
        at: &[f64],
        rng: &mut RngStream,
        out: &mut [f64],
    ) -> Result<()> {
        for (i, g) in out.iter_mut().enumerate() {
            *g = game.sample_gradient(i, at, noise.draw(rng));
        }
        if corruption.is_active() {
            corrupt_in_place(out, corruption, rng, 1)?;
        }
        Ok(())
    }

    fn gc_step(&mut self, x: &[f64], k: usize, rng: &mut RngStream) -> Result<StepOutcome> {
        let sv = self.config.schedules.values(k);
        let ws = &mut self.ws;
        Self::sampled_vector(
            self.game,
            &self.noise,
            &self.config.corruption,
            x,
            rng,
            &mut ws.vector,
        )?;
        for i in 0..x.len() {
            let g = clip_scalar(ws.vector[i], sv.tau);
            ws.next[i] = self
                .game
                .constraint()
                .clamp_component(i, x[i] - sv.alpha * g);
        }
        Ok(StepOutcome {
            samples_drawn: x.len(),
            theory_valid: true,
        })
    }

    fn sgda_step(&mut self, x: &[f64], k: usize, rng: &mut RngStream) -> Result<StepOutcome> {
        let sv = self.config.schedules.values(k);
        let step = self.config.schedules.fixed_step.unwrap_or(0.005);
        let ws = &mut self.ws;
        Self::sampled_vector(
            self.game,
            &self.noise,
            &self.config.corruption,
            x,
            rng,
            &mut ws.vector,
        )?;
        clip_in_place(&mut ws.vector, sv.tau);
        for i in 0..x.len() {
            ws.next[i] = self
                .game
                .constraint()
                .clamp_component(i, x[i] - step * ws.vector[i]);
        }
        Ok(StepOutcome {
            samples_drawn: x.len(),
            theory_valid: true,
        })
    }

    fn seg_step(&mut self, x: &[f64], k: usize, rng: &mut RngStream) -> Result<StepOutcome> {
        let sv = self.config.schedules.values(k);
        let step = self.config.schedules.fixed_step.unwrap_or(0.005);
        let ws = &mut self.ws;
        Self::sampled_vector(
            self.game,
            &self.noise,
            &self.config.corruption,
            x,
            rng,
            &mut ws.vector,
        )?;
        clip_in_place(&mut ws.vector, sv.tau);
        for i in 0..x.len() {
            ws.probe[i] = self
                .game
                .constraint()
                .clamp_component(i, x[i] - step * ws.vector[i]);
        }
        Self::sampled_vector(
            self.game,
            &self.noise,
            &self.config.corruption,
            &ws.probe,
            rng,
            &mut ws.vector,
        )?;
        clip_in_place(&mut ws.vector, sv.tau);
        for i in 0..x.len() {
            ws.next[i] = self
                .game
                .constraint()
                .clamp_component(i, x[i] - step * ws.vector[i]);
        }
        Ok(StepOutcome {
            samples_drawn: 2 * x.len(),
            theory_valid: true,
        })
    }
}

fn single_step(
    algorithm: Algorithm,
    game: &dyn Game,
    x: &[f64],
    k: usize,
    s: &Schedules,
    noise: &NoiseModel,
    corruption: &CorruptionModel,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, usize)> {
    let config = SeekerConfig::new(algorithm, s.clone()).with_corruption(*corruption);
    let mut seeker = Seeker::new(game, &config, *noise)?;
    let mut next = x.to_vec();
    let outcome = seeker.step(&mut next, k, rng)?;
    Ok((next, outcome.samples_drawn))
}

pub fn step_mom(
    game: &dyn Game,
    x: &[f64],
    k: usize,
    s: &Schedules,
    noise: &NoiseModel,
    corruption: &CorruptionModel,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, usize)> {
    single_step(Algorithm::Mom, game, x, k, s, noise, corruption, rng)
}

pub fn step_mom_bc(
    game: &dyn Game,
    x: &[f64],
    k: usize,
    s: &Schedules,
    noise: &NoiseModel,
    corruption: &CorruptionModel,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, usize)> {
    single_step(Algorithm::MomBc, game, x, k, s, noise, corruption, rng)
}

pub fn step_gc_sun(
    game: &dyn Game,
    x: &[f64],
    k: usize,
    s: &Schedules,
    noise: &NoiseModel,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, usize)> {
    single_step(
        Algorithm::GcSun,
        game,
        x,
        k,
        s,
        noise,
        &CorruptionModel::none(),
        rng,
    )
}

pub fn step_clipped_sgda(
    game: &dyn Game,
    x: &[f64],
    k: usize,
    s: &Schedules,
    noise: &NoiseModel,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, usize)> {
    single_step(
        Algorithm::ClippedSgda,
        game,
        x,
        k,
        s,
        noise,
        &CorruptionModel::none(),
        rng,
    )
}

pub fn step_clipped_seg(
    game: &dyn Game,
    x: &[f64],
    k: usize,
    s: &Schedules,
    noise: &NoiseModel,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, usize)> {
    single_step(
        Algorithm::ClippedSeg,
        game,
        x,
        k,
        s,
        noise,
        &CorruptionModel::none(),
        rng,
    )
}

/// Inputs of a budgeted run that stay fixed across trials.
#[derive(Clone, Copy)]
pub struct RunSetup<'a> {
    pub game: &'a dyn Game,
    /// Equilibrium the errors are measured against.
    pub equilibrium: &'a [f64],
    pub noise: NoiseModel,
    pub x0: &'a [f64],
    pub budget: u64,
    pub accounting: BudgetAccounting,
}

fn errors(x: &[f64], target: &[f64], target_norm: f64) -> (f64, f64) {
    let abs = x
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let rel = if target_norm > 0.0 {
        abs / target_norm
    } else {
        abs
    };
    (abs, rel)
}

/// Runs until the next update would push charged samples past the budget.
///
/// The trajectory starts with the `k = 0` record of `x0`.
pub fn run_seeker(
    setup: &RunSetup<'_>,
    config: &SeekerConfig,
    rng: &mut RngStream,
) -> Result<RunTrajectory> {
    run_seeker_with(setup, config, rng, |_, _| {})
}

/// [`run_seeker`] with an observer called on every iterate, `x0` included.
pub fn run_seeker_with(
    setup: &RunSetup<'_>,
    config: &SeekerConfig,
    rng: &mut RngStream,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<RunTrajectory> {
    let game = setup.game;
    let n = game.n_players();
    game.constraint().check_dim(setup.x0.len())?;
    game.constraint().check_dim(setup.equilibrium.len())?;
    if !game.constraint().contains(setup.x0) {
        return Err(invalid("x0", "initial profile lies outside the action box"));
    }
    if setup.budget == 0 {
        return Err(invalid("budget", "must be positive"));
    }
    let target_norm = setup.equilibrium.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut seeker = Seeker::new(game, config, setup.noise)?;

    let mut x = setup.x0.to_vec();
    let (abs, rel) = errors(&x, setup.equilibrium, target_norm);
    let mut traces = vec![IterationTrace {
        k: 0,
        samples: 0,
        abs_error: abs,
        rel_error: rel,
    }];
    observe(0, &x);
    let mut flags = RunFlags::default();
    let mut used = 0u64;
    let mut k = 0usize;
    loop {
        let cost = setup.accounting.charge(config.per_player_cost(k), n);
        if used + cost > setup.budget {
            break;
        }
        let outcome = seeker.step(&mut x, k, rng).map_err(|e| Error::Trial {
            seeker: config.label.clone(),
            trial: rng.stream_id(),
            iteration: k,
            source: Box::new(e),
        })?;
        debug_assert_eq!(outcome.samples_drawn, config.per_player_cost(k) * n);
        if !outcome.theory_valid {
            flags.theory_invalid_iterations += 1;
            flags.last_theory_invalid_k = Some(k);
        }
        used += cost;
        k += 1;
        let (abs, rel) = errors(&x, setup.equilibrium, target_norm);
        traces.push(IterationTrace {
            k,
            samples: used,
            abs_error: abs,
            rel_error: rel,
        });
        observe(k, &x);
    }
    Ok(RunTrajectory {
        traces,
        final_x: x,
        flags,
    })
}

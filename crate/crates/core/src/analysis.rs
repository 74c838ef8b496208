//! Numerical checks of the convergence theory.
//!
//! * Rate envelopes: squared error against
//!   `max{1/k, (ln k / k^β)^{2(δ−1)/δ}, 1/k^{2ρ+2ζ}}` with a fitted path constant.
//! * Least-squares log-log slopes of error curves.
//! * Worst-case simulation of the Chung-type recursion
//!   `Y_{k+1} ≤ (1 − r/k) Y_k + d (ln k)^τ / k^{p+1}` with a certified bound.
//! * Monte-Carlo check of the MoM conditional tail bound.

use crate::error::{invalid, Error, Result};
use crate::estimators::{
    block_means_into, deviation_threshold, median_in_place, plan_blocks, ThresholdParams,
};
use crate::exec::{map_indices, Execution};
use crate::game::Game;
use crate::noise::{NoiseModel, RngStream};
use crate::seekers::IterationTrace;

/// Trials per independent random stream in [`tail_bound_test`].
const TAIL_CHUNK: usize = 1000;

/// `(k, squared error)` pairs with `k ≥ 1`.
pub fn squared_error_points(traces: &[IterationTrace]) -> Vec<(usize, f64)> {
    traces
        .iter()
        .filter(|t| t.k >= 1)
        .map(|t| (t.k, t.sq_error()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeParams {
    pub delta: f64,
    pub beta: f64,
    /// Decay exponent of the bias-correction weight; with `zeta`, enables the
    /// `1/k^{2ρ+2ζ}` branch when `2ρ + 2ζ > 0`.
    pub rho: f64,
    pub zeta: f64,
}

impl EnvelopeParams {
    pub fn plain(delta: f64, beta: f64) -> Self {
        Self {
            delta,
            beta,
            rho: 0.0,
            zeta: 0.0,
        }
    }

    /// Shape of the squared-error bound at iteration `k ≥ 1`, without constant.
    pub fn shape(&self, k: f64) -> f64 {
        let varpi = 2.0 * (self.delta - 1.0) / self.delta;
        let mut v = (1.0 / k).max((k.ln() / k.powf(self.beta)).max(0.0).powf(varpi));
        let bias = 2.0 * self.rho + 2.0 * self.zeta;
        if bias > 0.0 {
            v = v.max(k.powf(-bias));
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEnvelope {
    pub delta: f64,
    pub beta: f64,
    pub rho: f64,
    pub zeta: f64,
    /// Smallest constant with `error² ≤ A·shape` from `k_start` on.
    pub fitted_a: f64,
    pub k_start: usize,
}

impl RateEnvelope {
    pub fn params(&self) -> EnvelopeParams {
        EnvelopeParams {
            delta: self.delta,
            beta: self.beta,
            rho: self.rho,
            zeta: self.zeta,
        }
    }

    pub fn at(&self, k: f64) -> f64 {
        self.fitted_a * self.params().shape(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeFit {
    pub envelope: RateEnvelope,
    /// Log-log slope of `error² / shape` over the final decade of iterations.
    pub ratio_slope: f64,
    /// `fitted_a` finite and `ratio_slope ≤ 0.1`.
    pub satisfied: bool,
}

/// Largest slope of the log ratio that still counts as non-growth.
pub const RATIO_SLOPE_LIMIT: f64 = 0.1;

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

fn window_start(points: &[(usize, f64)], window: f64) -> Result<usize> {
    if !(window > 0.0 && window <= 1.0) {
        return Err(invalid(
            "window",
            format!("must lie in (0, 1] (got {window})"),
        ));
    }
    let k_max = points.iter().map(|p| p.0).max().ok_or(Error::Empty)?;
    Ok((((1.0 - window) * k_max as f64).ceil() as usize).max(1))
}

/// Slope of `ln(error²)` against `ln k` over points with `k ≥ (1 − window)·k_max`.
pub fn fit_loglog_slope(points: &[(usize, f64)], window: f64) -> Result<f64> {
    let start = window_start(points, window)?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter(|&&(k, e)| k >= start && e > 0.0)
        .map(|&(k, e)| ((k as f64).ln(), e.ln()))
        .unzip();
    if xs.len() < 10 {
        return Err(Error::TooFewSamples {
            needed: 10,
            got: xs.len(),
        });
    }
    least_squares_slope(&xs, &ys).ok_or_else(|| invalid("points", "degenerate iteration range"))
}

pub fn fit_envelope(
    points: &[(usize, f64)],
    params: EnvelopeParams,
    window: f64,
) -> Result<EnvelopeFit> {
    let mut points: Vec<(usize, f64)> = points.iter().copied().filter(|p| p.0 >= 1).collect();
    points.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    if points.len() < 20 {
        return Err(Error::TooFewSamples {
            needed: 20,
            got: points.len(),
        });
    }
    if !(params.delta > 1.0 && params.delta <= 2.0) || !(params.beta > 0.0) {
        return Err(invalid("envelope", "need δ ∈ (1, 2] and β > 0"));
    }
    let start = window_start(&points, window)?;
    let k_start = points
        .iter()
        .map(|p| p.0)
        .filter(|&k| k >= start)
        .min()
        .unwrap_or(start);
    let fitted_a = points
        .iter()
        .filter(|p| p.0 >= k_start)
        .map(|&(k, e)| e / params.shape(k as f64))
        .fold(0.0, f64::max);

    let k_max = points.iter().map(|p| p.0).max().unwrap_or(1);
    let decade = (k_max / 10).max(1);
    let (xs, ys): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter(|&&(k, e)| k >= decade && e > 0.0)
        .map(|&(k, e)| ((k as f64).ln(), (e / params.shape(k as f64)).ln()))
        .unzip();
    let ratio_slope = least_squares_slope(&xs, &ys).unwrap_or(0.0);
    Ok(EnvelopeFit {
        envelope: RateEnvelope {
            delta: params.delta,
            beta: params.beta,
            rho: params.rho,
            zeta: params.zeta,
            fitted_a,
            k_start,
        },
        ratio_slope,
        satisfied: fitted_a.is_finite() && ratio_slope <= RATIO_SLOPE_LIMIT,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChungInstance {
    pub r: f64,
    pub p: f64,
    pub d: f64,
    pub tau: f64,
    pub k0: usize,
    pub y0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChungCertificate {
    /// `Y_k` for `k = k0..=horizon`.
    pub trajectory: Vec<f64>,
    pub k0: usize,
    pub certified_a: f64,
    pub certified_k: usize,
}

impl ChungCertificate {
    pub fn y(&self, k: usize) -> f64 {
        self.trajectory[k - self.k0]
    }
}

impl ChungInstance {
    fn bound_shape(&self, k: usize) -> f64 {
        let kf = k as f64;
        kf.ln().powf(self.tau) / kf.powf(self.p)
    }
}

/// Simulates the recursion with equality and certifies `Y_k ≤ A (ln k)^τ / k^p`.
///
/// `A = max{2d/(r − p), Y_K K^p / (ln K)^τ} + 1`; `K` is the smallest index
/// from which that `A` bounds the whole simulated tail.
pub fn chung_oracle(inst: &ChungInstance, horizon: usize) -> Result<ChungCertificate> {
    if !(inst.r > inst.p) || !(inst.p >= 0.0) {
        return Err(invalid(
            "r",
            format!("need r > p ≥ 0 (got r = {}, p = {})", inst.r, inst.p),
        ));
    }
    if !(inst.d >= 0.0) || !(inst.tau >= 0.0) || !(inst.y0 >= 0.0) {
        return Err(invalid("chung", "d, τ and y0 must be nonnegative"));
    }
    if inst.k0 < 1 || horizon <= inst.k0 {
        return Err(invalid(
            "horizon",
            format!(
                "need 1 ≤ k0 < horizon (k0 = {}, horizon = {horizon})",
                inst.k0
            ),
        ));
    }

    let mut trajectory = Vec::with_capacity(horizon - inst.k0 + 1);
    let mut y = inst.y0;
    trajectory.push(y);
    for k in inst.k0..horizon {
        let kf = k as f64;
        y = ((1.0 - inst.r / kf) * y + inst.d * kf.ln().powf(inst.tau) / kf.powf(inst.p + 1.0))
            .max(0.0);
        trajectory.push(y);
    }

    // (ln K)^τ must be positive for the ratio to exist.
    let first = if inst.tau > 0.0 {
        inst.k0.max(2)
    } else {
        inst.k0
    };
    let ratio = |k: usize| trajectory[k - inst.k0] / inst.bound_shape(k);
    let mut suffix_max = vec![0.0f64; horizon + 2];
    for k in (first..=horizon).rev() {
        suffix_max[k] = suffix_max[k + 1].max(ratio(k));
    }
    let floor = 2.0 * inst.d / (inst.r - inst.p);
    let (certified_k, certified_a) = (first..=horizon)
        .map(|k| (k, floor.max(ratio(k)) + 1.0))
        .find(|&(k, a)| a >= suffix_max[k])
        .expect("the last index always certifies itself");

    let cert = ChungCertificate {
        trajectory,
        k0: inst.k0,
        certified_a,
        certified_k,
    };
    debug_assert!((certified_k..=horizon).all(|k| cert.y(k) <= certified_a * inst.bound_shape(k)));
    Ok(cert)
}

/// Re-checks a certificate pointwise over `[certified_k, horizon]`.
pub fn verify_certificate(inst: &ChungInstance, cert: &ChungCertificate) -> bool {
    let horizon = cert.k0 + cert.trajectory.len() - 1;
    (cert.certified_k..=horizon).all(|k| cert.y(k) <= cert.certified_a * inst.bound_shape(k))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailBoundReport {
    pub violation_rate: f64,
    /// `2γ` plus three binomial standard errors.
    pub bound: f64,
    pub pass: bool,
    /// Deviation threshold applied to every estimate.
    pub threshold: f64,
    pub violations: u64,
    pub events: u64,
}

/// Repeats the MoM estimate at a fixed profile and counts deviations beyond
/// the threshold, per player, over `trials` repetitions.
pub fn tail_bound_test(
    game: &dyn Game,
    x: &[f64],
    noise: &NoiseModel,
    m: usize,
    gamma: f64,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<TailBoundReport> {
    game.constraint().check_dim(x.len())?;
    noise.kind.validate()?;
    if trials < 1000 {
        return Err(invalid(
            "trials",
            format!("need at least 1000 (got {trials})"),
        ));
    }
    let plan = plan_blocks(m, gamma)?;
    if !plan.theory_valid {
        return Err(invalid(
            "m",
            format!("m = {m} is below the sample condition for γ = {gamma}"),
        ));
    }
    let params = ThresholdParams::new(noise.delta, game.noise_gain().abs() * noise.nu)?;
    let threshold = deviation_threshold(&params, m, gamma);
    let truth = game.mean_gradient(x);
    let n = game.n_players();

    let chunks = trials.div_ceil(TAIL_CHUNK);
    let counts = map_indices(chunks, exec, |c| {
        let mut rng = RngStream::new(seed, c as u64);
        let reps = TAIL_CHUNK.min(trials - c * TAIL_CHUNK);
        let mut buf = vec![0.0; m];
        let mut grads = Vec::with_capacity(m);
        let mut means = Vec::with_capacity(plan.b);
        let mut violations = 0u64;
        for _ in 0..reps {
            for (i, &f) in truth.iter().enumerate() {
                noise.fill(&mut rng, &mut buf);
                game.sample_gradients(i, x, &buf, &mut grads);
                block_means_into(&grads, &plan, &mut means).expect("plan fits the buffer");
                let estimate = median_in_place(&mut means).expect("plan has blocks");
                // Slack absorbs rounding in the block sums.
                if (estimate - f).abs() > threshold + 1e-12 * (1.0 + f.abs()) {
                    violations += 1;
                }
            }
        }
        violations
    });
    let violations: u64 = counts.into_iter().sum();
    let events = (trials * n) as u64;
    let violation_rate = violations as f64 / events as f64;
    let p = 2.0 * gamma;
    let bound = p + 3.0 * (p * (1.0 - p).max(0.0) / trials as f64).sqrt();
    Ok(TailBoundReport {
        violation_rate,
        bound,
        pass: violation_rate <= bound,
        threshold,
        violations,
        events,
    })
}

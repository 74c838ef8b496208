//! Heavy-tailed gradient noise, seeded random streams and sample corruption.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

/// Safety factor applied to quadrature moment roots.
pub const MOMENT_MARGIN: f64 = 1.05;

/// A reproducible random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8 with the stream id mapped onto the cipher's stream
/// counter, so distinct trials draw from non-overlapping sequences.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw on `(0, 1]`.
    #[inline]
    pub fn uniform_open_closed(&mut self) -> f64 {
        // 53 random mantissa bits mapped onto {1, ..., 2^53} / 2^53.
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn rademacher(&mut self) -> f64 {
        if self.rng.next_u32() & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Pareto(α) by inversion of a uniform draw `u ∈ (0, 1]`: `Z = u^{−1/α}`.
#[inline]
pub fn pareto_from_uniform(u: f64, alpha: f64) -> f64 {
    u.powf(-1.0 / alpha)
}

pub fn draw_pareto(alpha: f64, rng: &mut RngStream) -> Result<f64> {
    check_tail_index(alpha)?;
    Ok(pareto_from_uniform(rng.uniform_open_closed(), alpha))
}

fn check_tail_index(alpha: f64) -> Result<()> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(invalid(
            "alpha",
            format!("tail index must exceed 1 (got {alpha})"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    /// `S·(Z − E Z)` with `Z ~ Pareto(α)` and an independent random sign `S`.
    SymmetrizedPareto {
        alpha: f64,
    },
    /// `Z − E Z` with `Z ~ Pareto(α)`; right-skewed.
    ShiftedPareto {
        alpha: f64,
    },
    Gaussian {
        sigma: f64,
    },
    None,
}

impl NoiseKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseKind::SymmetrizedPareto { alpha } | NoiseKind::ShiftedPareto { alpha } => {
                check_tail_index(alpha)
            }
            NoiseKind::Gaussian { sigma } => {
                if !(sigma > 0.0) || !sigma.is_finite() {
                    return Err(invalid("sigma", format!("must be positive (got {sigma})")));
                }
                Ok(())
            }
            NoiseKind::None => Ok(()),
        }
    }

    /// Short identifier used in configs and metadata.
    pub fn id(&self) -> &'static str {
        match self {
            NoiseKind::SymmetrizedPareto { .. } => "sym-pareto",
            NoiseKind::ShiftedPareto { .. } => "shifted-pareto",
            NoiseKind::Gaussian { .. } => "gaussian",
            NoiseKind::None => "none",
        }
    }

    #[inline]
    pub fn draw(&self, rng: &mut RngStream) -> f64 {
        match *self {
            NoiseKind::SymmetrizedPareto { alpha } => {
                let z = pareto_from_uniform(rng.uniform_open_closed(), alpha);
                rng.rademacher() * (z - pareto_mean(alpha))
            }
            NoiseKind::ShiftedPareto { alpha } => {
                pareto_from_uniform(rng.uniform_open_closed(), alpha) - pareto_mean(alpha)
            }
            NoiseKind::Gaussian { sigma } => sigma * rng.standard_normal(),
            NoiseKind::None => 0.0,
        }
    }
}

#[inline]
fn pareto_mean(alpha: f64) -> f64 {
    alpha / (alpha - 1.0)
}

/// Noise distribution together with a certified moment pair: `E|ξ|^δ ≤ ν^δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub delta: f64,
    pub nu: f64,
}

impl NoiseModel {
    /// Certifies `ν` for the given moment order by quadrature.
    pub fn certified(kind: NoiseKind, delta: f64) -> Result<Self> {
        let nu = certify_moment(kind, delta)?;
        Ok(Self { kind, delta, nu })
    }

    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            delta: 2.0,
            nu: 0.0,
        }
    }

    #[inline]
    pub fn draw(&self, rng: &mut RngStream) -> f64 {
        self.kind.draw(rng)
    }

    pub fn fill(&self, rng: &mut RngStream, out: &mut [f64]) {
        for v in out {
            *v = self.kind.draw(rng);
        }
    }
}

pub fn draw_noise(model: &NoiseModel, rng: &mut RngStream) -> f64 {
    model.draw(rng)
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 1.0 && delta <= 2.0) {
        return Err(invalid(
            "delta",
            format!("moment order must lie in (1, 2] (got {delta})"),
        ));
    }
    Ok(())
}

fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    quadrature::double_exponential::integrate(f, a, b, 1e-13).integral
}

/// `E|ξ|^δ` by quadrature of the known density.
pub fn absolute_moment(kind: NoiseKind, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    kind.validate()?;
    match kind {
        NoiseKind::SymmetrizedPareto { alpha } | NoiseKind::ShiftedPareto { alpha } => {
            if delta >= alpha {
                return Err(Error::MomentDiverges { alpha, delta });
            }
            // |ξ| = |Z − μ| for both Pareto variants.
            let mu = pareto_mean(alpha);
            let body = integrate(
                |z| (mu - z).max(0.0).powf(delta) * alpha * z.powf(-alpha - 1.0),
                1.0,
                mu,
            );
            // Tail ∫_μ^∞ (z − μ)^δ α z^{−α−1} dz with z = μ/t, then t = w^q,
            // q = 1/(α − δ), which removes the endpoint singularity at t = 0.
            let q = 1.0 / (alpha - delta);
            let tail = alpha
                * mu.powf(delta - alpha)
                * integrate(|w| q * (1.0 - w.powf(q)).max(0.0).powf(delta), 0.0, 1.0);
            Ok(body + tail)
        }
        NoiseKind::Gaussian { sigma } => {
            let density = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            // Density mass beyond 40 is far below double precision.
            let half = integrate(|x| x.powf(delta) * density(x), 0.0, 8.0)
                + integrate(|x| x.powf(delta) * density(x), 8.0, 40.0);
            Ok(sigma.powf(delta) * 2.0 * half)
        }
        NoiseKind::None => Ok(0.0),
    }
}

/// `(E|ξ|^δ)^{1/δ}` without safety margin.
pub fn moment_root(kind: NoiseKind, delta: f64) -> Result<f64> {
    Ok(absolute_moment(kind, delta)?.powf(1.0 / delta))
}

/// A certified `ν` with `E|ξ|^δ ≤ ν^δ`: the quadrature root times [`MOMENT_MARGIN`].
pub fn certify_moment(kind: NoiseKind, delta: f64) -> Result<f64> {
    Ok(moment_root(kind, delta)? * MOMENT_MARGIN)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorruptionMode {
    None,
    /// Exactly this many whole blocks per estimate.
    FixedCount(usize),
    /// Each raw sample independently with probability `p`.
    Probabilistic(f64),
    /// `⌊(b − 1)/2⌋` whole blocks, the most a median over `b` blocks tolerates.
    Minority,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionModel {
    pub mode: CorruptionMode,
    pub magnitude: f64,
}

impl CorruptionModel {
    pub fn none() -> Self {
        Self {
            mode: CorruptionMode::None,
            magnitude: 0.0,
        }
    }

    pub fn is_active(&self) -> bool {
        !matches!(self.mode, CorruptionMode::None)
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            CorruptionMode::Probabilistic(p) if !(0.0..1.0).contains(&p) => Err(invalid(
                "corrupt_p",
                format!("must lie in [0, 1) (got {p})"),
            )),
            _ if !self.magnitude.is_finite() => Err(invalid("corrupt_magnitude", "must be finite")),
            _ => Ok(()),
        }
    }
}

impl Default for CorruptionModel {
    fn default() -> Self {
        Self::none()
    }
}

/// Overwrites selected entries of `samples` with the corruption magnitude.
///
/// `samples` is treated as consecutive blocks of `block_size`; block modes
/// pick whole blocks uniformly without replacement.
pub fn corrupt_in_place(
    samples: &mut [f64],
    model: &CorruptionModel,
    rng: &mut RngStream,
    block_size: usize,
) -> Result<()> {
    if block_size == 0 {
        return Err(invalid("block_size", "must be positive"));
    }
    let blocks = samples.len() / block_size;
    let count = match model.mode {
        CorruptionMode::None => return Ok(()),
        CorruptionMode::Probabilistic(p) => {
            for v in samples.iter_mut() {
                if rng.uniform_open_closed() <= p {
                    *v = model.magnitude;
                }
            }
            return Ok(());
        }
        CorruptionMode::FixedCount(c) => {
            if c >= blocks {
                return Err(invalid(
                    "corrupt_count",
                    format!("{c} corrupted blocks out of {blocks} leaves no clean block"),
                ));
            }
            c
        }
        CorruptionMode::Minority => blocks.saturating_sub(1) / 2,
    };
    if count == 0 {
        return Ok(());
    }
    for block in rand::seq::index::sample(rng.rng(), blocks, count) {
        samples[block * block_size..(block + 1) * block_size].fill(model.magnitude);
    }
    Ok(())
}

pub fn corrupt(
    samples: &[f64],
    model: &CorruptionModel,
    rng: &mut RngStream,
    block_size: usize,
) -> Result<Vec<f64>> {
    let mut out = samples.to_vec();
    corrupt_in_place(&mut out, model, rng, block_size)?;
    Ok(out)
}

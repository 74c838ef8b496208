//! Median-of-means gradient estimation.
//!
//! `m` raw samples are split into `b` consecutive blocks of `s` samples, each
//! block is averaged and the median of the block means is the estimate.
//! Samples past `b·s` are dropped. The block count follows
//! `b = ⌊min{8 ln(e^{1/8}/γ), m/2}⌋`, which trades robustness (more blocks)
//! against per-block averaging (larger blocks).

use crate::error::{invalid, Error, Result};

/// `ln(e^{1/8} γ^{−1})`.
#[inline]
pub fn confidence_log(gamma: f64) -> f64 {
    0.125 + (1.0 / gamma).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockPlan {
    pub m: usize,
    pub gamma: f64,
    pub b: usize,
    pub s: usize,
    pub m_used: usize,
    /// Whether `m ≥ 16 ln(e^{1/8}/γ) + 2`, the sample condition of the tail bound.
    pub theory_valid: bool,
}

impl BlockPlan {
    /// One block over all `m` samples: the plain sample mean.
    pub fn single(m: usize, gamma: f64) -> Self {
        Self {
            m,
            gamma,
            b: 1,
            s: m,
            m_used: m,
            theory_valid: false,
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid(
            "gamma",
            format!("must lie in (0, 1) (got {gamma})"),
        ));
    }
    Ok(())
}

pub fn plan_blocks(m: usize, gamma: f64) -> Result<BlockPlan> {
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: m });
    }
    check_gamma(gamma)?;
    let log = confidence_log(gamma);
    let b = ((8.0 * log).min(m as f64 / 2.0).floor() as usize).max(1);
    let s = m / b;
    Ok(BlockPlan {
        m,
        gamma,
        b,
        s,
        m_used: b * s,
        theory_valid: m as f64 >= 16.0 * log + 2.0,
    })
}

/// Median of a slice, reordering it in place.
///
/// Even lengths average the two middle values.
pub fn median_in_place(values: &mut [f64]) -> Result<f64> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Empty);
    }
    let mid = n / 2;
    let (left, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        return Ok(upper);
    }
    let lower = left.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((lower + upper) / 2.0)
}

pub fn median(values: &[f64]) -> Result<f64> {
    median_in_place(&mut values.to_vec())
}

/// Block means of the first `plan.m_used` samples, written into `out`.
pub fn block_means_into(samples: &[f64], plan: &BlockPlan, out: &mut Vec<f64>) -> Result<()> {
    if samples.len() < plan.m_used {
        return Err(Error::TooFewSamples {
            needed: plan.m_used,
            got: samples.len(),
        });
    }
    if plan.b == 0 || plan.s == 0 {
        return Err(invalid("plan", "empty block plan"));
    }
    out.clear();
    let s = plan.s as f64;
    out.extend(
        samples[..plan.m_used]
            .chunks_exact(plan.s)
            .map(|block| block.iter().sum::<f64>() / s),
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomEstimate {
    pub estimate: f64,
    pub block_means: Vec<f64>,
}

pub fn mom_estimate(samples: &[f64], plan: &BlockPlan) -> Result<MomEstimate> {
    let mut block_means = Vec::with_capacity(plan.b);
    block_means_into(samples, plan, &mut block_means)?;
    let estimate = median(&block_means)?;
    Ok(MomEstimate {
        estimate,
        block_means,
    })
}

/// Moment data behind the deviation threshold; `c1 = (12 ν^δ)^{1/δ}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdParams {
    pub delta: f64,
    pub nu: f64,
    pub c1: f64,
}

impl ThresholdParams {
    pub fn new(delta: f64, nu: f64) -> Result<Self> {
        if !(delta > 1.0 && delta <= 2.0) {
            return Err(invalid(
                "delta",
                format!("must lie in (1, 2] (got {delta})"),
            ));
        }
        if !(nu >= 0.0) || !nu.is_finite() {
            return Err(invalid(
                "nu",
                format!("must be a finite nonnegative bound (got {nu})"),
            ));
        }
        Ok(Self {
            delta,
            nu,
            c1: (12.0 * nu.powf(delta)).powf(1.0 / delta),
        })
    }
}

/// `C₁ (16 ln(e^{1/8}/γ) / m)^{(δ−1)/δ}`: the MoM error exceeds this with
/// probability at most `2γ` when the plan is theory-valid.
pub fn deviation_threshold(params: &ThresholdParams, m: usize, gamma: f64) -> f64 {
    let exponent = (params.delta - 1.0) / params.delta;
    params.c1 * (16.0 * confidence_log(gamma) / m as f64).powf(exponent)
}

/// `(1 − η)·median + η·mean` of the block means.
pub fn bias_corrected_estimate(block_means: &[f64], eta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(invalid("eta", format!("must lie in [0, 1] (got {eta})")));
    }
    let med = median(block_means)?;
    let mean = block_means.iter().sum::<f64>() / block_means.len() as f64;
    Ok((1.0 - eta) * med + eta * mean)
}

/// Rescales `v` to norm at most `tau`.
pub fn clip(v: &[f64], tau: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    clip_in_place(&mut out, tau);
    out
}

pub fn clip_in_place(v: &mut [f64], tau: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > tau {
        let scale = tau / norm;
        v.iter_mut().for_each(|x| *x *= scale);
    }
}

#[inline]
pub fn clip_scalar(v: f64, tau: f64) -> f64 {
    v.clamp(-tau, tau)
}

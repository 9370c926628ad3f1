//! Win / practical-equivalence / loss frequencies and effect summaries from
//! posterior draws.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::sampler::diagnostics::quantile_sorted;
use crate::sampler::PosteriorDraws;

#[derive(Debug, Error, PartialEq)]
pub enum DecisionError {
    #[error("non-finite or out-of-domain input to {0}")]
    NonFiniteInput(&'static str),
    #[error("no draws to summarize")]
    EmptyDraws,
    #[error("draws have no parameter named {0}")]
    MissingParameter(String),
}

/// CDF of the standard Student-t distribution with `nu` degrees of freedom.
pub fn student_t_cdf(x: f64, nu: f64) -> Result<f64, DecisionError> {
    if !x.is_finite() || !nu.is_finite() || nu <= 0.0 {
        return Err(DecisionError::NonFiniteInput("student_t_cdf"));
    }
    if x == 0.0 {
        return Ok(0.5);
    }
    let x2 = x * x;
    // Use whichever incomplete-beta argument is further from 1.
    let tail = if x2 < nu {
        let half_body = 0.5 * beta_reg(0.5, 0.5 * nu, x2 / (nu + x2));
        0.5 - half_body
    } else {
        0.5 * beta_reg(0.5 * nu, 0.5, nu / (nu + x2))
    };
    Ok(if x < 0.0 { tail } else { 1.0 - tail })
}

/// Probability that `delta_new ~ t(delta0, sigma0, nu)` falls left of, inside
/// or right of the interval `[-epsilon, epsilon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionProbs {
    pub p_left: f64,
    pub p_rope: f64,
    pub p_right: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Left,
    Rope,
    Right,
}

impl RegionProbs {
    /// Region with the largest probability. Ties go to the earlier of
    /// left, rope, right.
    pub fn argmax(&self) -> Region {
        if self.p_left >= self.p_rope && self.p_left >= self.p_right {
            Region::Left
        } else if self.p_rope >= self.p_right {
            Region::Rope
        } else {
            Region::Right
        }
    }
}

pub fn region_probabilities(delta0: f64, sigma0: f64, nu: f64, epsilon: f64) -> Result<RegionProbs, DecisionError> {
    if ![delta0, sigma0, nu, epsilon].iter().all(|v| v.is_finite()) || sigma0 <= 0.0 || nu <= 0.0 || epsilon <= 0.0 {
        return Err(DecisionError::NonFiniteInput("region_probabilities"));
    }
    let p_left = student_t_cdf((-epsilon - delta0) / sigma0, nu)?;
    // upper tail written as a lower tail by symmetry
    let p_right = student_t_cdf((delta0 - epsilon) / sigma0, nu)?;
    let p_rope = (1.0 - p_left - p_right).clamp(0.0, 1.0);
    Ok(RegionProbs { p_left, p_rope, p_right })
}

/// `P(|delta_new| > 1)` for one draw.
pub fn tail_beyond_unit(delta0: f64, sigma0: f64, nu: f64) -> Result<f64, DecisionError> {
    let p = region_probabilities(delta0, sigma0, nu, 1.0)?;
    Ok(p.p_left + p.p_right)
}

/// Reported quantities for one comparison. `p_base_better` is the
/// frequency of the right region (`delta > epsilon`, the first method ahead).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSummary {
    pub p_base_better: f64,
    pub p_rope: f64,
    pub p_other_better: f64,
    pub e_delta0: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_bound_violation: f64,
    pub epsilon: f64,
    pub n_draws: usize,
}

/// The `(delta0, sigma0, nu)` draw columns.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyDraws {
    pub delta0: Vec<f64>,
    pub sigma0: Vec<f64>,
    pub nu: Vec<f64>,
}

impl KeyDraws {
    pub fn from_draws(draws: &PosteriorDraws) -> Result<Self, DecisionError> {
        let col = |name: &str| draws.column(name).ok_or_else(|| DecisionError::MissingParameter(name.to_string()));
        let out = Self {
            delta0: col("delta0")?,
            sigma0: col("sigma0")?,
            nu: col("nu")?,
        };
        if out.delta0.is_empty() {
            return Err(DecisionError::EmptyDraws);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.delta0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta0.is_empty()
    }

    fn iter(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.delta0
            .iter()
            .zip(&self.sigma0)
            .zip(&self.nu)
            .map(|((&d, &s), &n)| (d, s, n))
    }

    /// Counts of draws whose most probable region is left, rope, right.
    pub fn region_counts(&self, epsilon: f64) -> Result<[usize; 3], DecisionError> {
        let mut counts = [0usize; 3];
        for (d, s, n) in self.iter() {
            let slot = match region_probabilities(d, s, n, epsilon)?.argmax() {
                Region::Left => 0,
                Region::Rope => 1,
                Region::Right => 2,
            };
            counts[slot] += 1;
        }
        Ok(counts)
    }

    pub fn bound_violation(&self) -> Result<f64, DecisionError> {
        if self.is_empty() {
            return Err(DecisionError::EmptyDraws);
        }
        let mut total = 0.0;
        for (d, s, n) in self.iter() {
            total += tail_beyond_unit(d, s, n)?;
        }
        Ok(total / self.len() as f64)
    }

    pub fn summarize(&self, epsilon: f64) -> Result<DecisionSummary, DecisionError> {
        if self.is_empty() {
            return Err(DecisionError::EmptyDraws);
        }
        let n = self.len();
        let counts = self.region_counts(epsilon)?;
        let (e_delta0, ci_low, ci_high) = delta0_summary(&self.delta0);
        Ok(DecisionSummary {
            p_base_better: counts[2] as f64 / n as f64,
            p_rope: counts[1] as f64 / n as f64,
            p_other_better: counts[0] as f64 / n as f64,
            e_delta0,
            ci_low,
            ci_high,
            p_bound_violation: self.bound_violation()?,
            epsilon,
            n_draws: n,
        })
    }
}

/// Mean and equal-tailed 95% interval (linear interpolation).
pub fn delta0_summary(delta0: &[f64]) -> (f64, f64, f64) {
    let mean = delta0.iter().sum::<f64>() / delta0.len() as f64;
    let mut sorted = delta0.to_vec();
    sorted.sort_by(f64::total_cmp);
    (mean, quantile_sorted(&sorted, 0.025), quantile_sorted(&sorted, 0.975))
}

pub fn classify_draws(draws: &PosteriorDraws, epsilon: f64) -> Result<DecisionSummary, DecisionError> {
    KeyDraws::from_draws(draws)?.summarize(epsilon)
}

pub fn bound_violation(draws: &PosteriorDraws) -> Result<f64, DecisionError> {
    KeyDraws::from_draws(draws)?.bound_violation()
}

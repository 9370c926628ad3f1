//! Convergence diagnostics: rank-normalized split R-hat and bulk/tail
//! effective sample sizes.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use super::PosteriorDraws;

pub const RHAT_MAX: f64 = 1.01;
pub const ESS_BULK_MIN: f64 = 400.0;
pub const ESS_TAIL_MIN: f64 = 100.0;

/// Parameters the pass rule looks at when present.
pub const KEY_PARAMETERS: [&str; 3] = ["delta0", "sigma0", "nu"];

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("need at least 2 chains and 4 draws per chain, got {chains} x {draws}")]
    InsufficientDraws { chains: usize, draws: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub parameter_names: Vec<String>,
    pub rhat: Vec<f64>,
    pub ess_bulk: Vec<f64>,
    pub ess_tail: Vec<f64>,
    pub n_divergent: usize,
    pub n_treedepth: usize,
    pub max_rhat: f64,
    pub min_ess_bulk: f64,
    pub min_ess_tail: f64,
    pub pass: bool,
}

/// Summary values over the key parameters, applying the pass thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeySummary {
    pub max_rhat: f64,
    pub min_ess_bulk: f64,
    pub min_ess_tail: f64,
    pub n_divergent: usize,
}

impl KeySummary {
    /// NaN values never pass.
    pub fn passes(&self) -> bool {
        self.max_rhat <= RHAT_MAX
            && self.min_ess_bulk >= ESS_BULK_MIN
            && self.min_ess_tail >= ESS_TAIL_MIN
            && self.n_divergent == 0
    }
}

pub fn compute_diagnostics(draws: &PosteriorDraws) -> Result<Diagnostics, DiagnosticsError> {
    if draws.n_chains < 2 || draws.n_draws < 4 {
        return Err(DiagnosticsError::InsufficientDraws {
            chains: draws.n_chains,
            draws: draws.n_draws,
        });
    }
    let n_params = draws.parameter_names.len();
    let mut rhat = Vec::with_capacity(n_params);
    let mut ess_bulk_v = Vec::with_capacity(n_params);
    let mut ess_tail_v = Vec::with_capacity(n_params);
    for p in 0..n_params {
        let chains = draws.chains_for(p);
        rhat.push(split_rhat(&chains));
        ess_bulk_v.push(ess_bulk(&chains));
        ess_tail_v.push(ess_tail(&chains));
    }

    let mut key: Vec<usize> = KEY_PARAMETERS
        .iter()
        .filter_map(|k| draws.parameter_names.iter().position(|n| n == k))
        .collect();
    if key.is_empty() {
        key = (0..n_params).collect();
    }
    // NaN propagates through these folds so that it fails the pass rule.
    let max_rhat = key.iter().map(|&i| rhat[i]).fold(f64::NEG_INFINITY, nan_max);
    let min_ess_bulk = key.iter().map(|&i| ess_bulk_v[i]).fold(f64::INFINITY, nan_min);
    let min_ess_tail = key.iter().map(|&i| ess_tail_v[i]).fold(f64::INFINITY, nan_min);
    let n_divergent = draws.n_divergent();
    let summary = KeySummary {
        max_rhat,
        min_ess_bulk,
        min_ess_tail,
        n_divergent,
    };

    Ok(Diagnostics {
        parameter_names: draws.parameter_names.clone(),
        rhat,
        ess_bulk: ess_bulk_v,
        ess_tail: ess_tail_v,
        n_divergent,
        n_treedepth: draws.n_treedepth(),
        max_rhat,
        min_ess_bulk,
        min_ess_tail,
        pass: summary.passes(),
    })
}

fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

fn nan_min(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.min(b)
    }
}

/// Split each chain into two halves, dropping the middle draw of odd chains.
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    chains
        .iter()
        .flat_map(|c| [c[..half].to_vec(), c[n - half..n].to_vec()])
        .collect()
}

/// Normal scores of pooled average ranks: `Phi^-1((r - 3/8) / (S + 1/4))`.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(Vec::len).sum();
    let mut order: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, xs)| xs.iter().enumerate().map(move |(i, &x)| (x, c, i)))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let std_normal = Normal::standard();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && order[end].0 == order[start].0 {
            end += 1;
        }
        // ranks are 1-based; ties share their average rank
        let rank = (start + end + 1) as f64 / 2.0;
        let z = std_normal.inverse_cdf((rank - 0.375) / (total as f64 + 0.25));
        for &(_, c, i) in &order[start..end] {
            out[c][i] = z;
        }
        start = end;
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Classic potential scale reduction over the given (already split) chains.
fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let first = chains[0][0];
    if chains.iter().flatten().all(|&x| x == first) {
        return f64::NAN;
    }
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let b = n * variance(&means);
    let w = mean(&chains.iter().map(|c| variance(c)).collect::<Vec<_>>());
    let var_plus = (n - 1.0) / n * w + b / n;
    if m < 2.0 {
        return f64::NAN;
    }
    (var_plus / w).sqrt()
}

/// Rank-normalized split R-hat: the larger of the bulk and folded versions.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    if split.len() < 2 || split[0].len() < 2 {
        return f64::NAN;
    }
    let bulk = rhat_basic(&rank_normalize(&split));
    let all: Vec<f64> = split.iter().flatten().copied().collect();
    let med = quantile(&all, 0.5);
    let folded: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|x| (x - med).abs()).collect())
        .collect();
    let tail = rhat_basic(&rank_normalize(&folded));
    // a constant folded sequence carries no information; rely on the bulk value
    match (bulk.is_nan(), tail.is_nan()) {
        (false, true) => bulk,
        (true, false) => tail,
        _ => nan_max(bulk, tail),
    }
}

pub fn ess_bulk(chains: &[Vec<f64>]) -> f64 {
    ess(&rank_normalize(&split_chains(chains)))
}

/// Minimum of the 5% and 95% quantile ESS.
pub fn ess_tail(chains: &[Vec<f64>]) -> f64 {
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    let at = |p: f64| {
        let q = quantile(&all, p);
        let indicator: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| c.iter().map(|&x| if x <= q { 1.0 } else { 0.0 }).collect())
            .collect();
        ess(&split_chains(&indicator))
    };
    nan_min(at(0.05), at(0.95))
}

/// ESS of the mean of the raw (unsplit, untransformed) chains.
pub fn ess_mean(chains: &[Vec<f64>]) -> f64 {
    ess(&split_chains(chains))
}

/// Linear-interpolation quantile of an unsorted sample.
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, p)
}

pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Biased autocovariance (`1/n` normalization) for lags `0..n`, via FFT.
fn autocovariance(xs: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = xs.len();
    let m = mean(xs);
    let len = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = xs
        .iter()
        .map(|&x| Complex::new(x - m, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(len)
        .collect();
    planner.plan_fft_forward(len).process(&mut buf);
    for c in &mut buf {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    buf[..n].iter().map(|c| c.re / (len * n) as f64).collect()
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let mut planner = FftPlanner::new();
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(&c[..n], &mut planner)).collect();
    let nf = n as f64;
    let chain_means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let mean_var = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += variance(&chain_means);
    }
    let mean_acov = |lag: usize| acov.iter().map(|a| a[lag]).sum::<f64>() / m as f64;

    let mut rho = vec![0.0; n];
    let mut t = 0;
    let mut rho_even = 1.0;
    let mut rho_odd = 1.0 - (mean_var - mean_acov(1)) / var_plus;
    rho[0] = rho_even;
    rho[1] = rho_odd;
    while t + 5 < n && !(rho_even + rho_odd).is_nan() && rho_even + rho_odd > 0.0 {
        t += 2;
        rho_even = 1.0 - (mean_var - mean_acov(t)) / var_plus;
        rho_odd = 1.0 - (mean_var - mean_acov(t + 1)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[t] = rho_even;
            rho[t + 1] = rho_odd;
        }
    }
    let max_t = t;
    if rho_even > 0.0 {
        rho[max_t] = rho_even;
    }

    // enforce a monotone sequence of paired sums
    let mut t = 0;
    while t + 4 <= max_t {
        t += 2;
        let prev = rho[t - 2] + rho[t - 1];
        if rho[t] + rho[t + 1] > prev {
            rho[t] = prev / 2.0;
            rho[t + 1] = prev / 2.0;
        }
    }
    let total = (m * n) as f64;
    let tau = -1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t];
    let tau = tau.max(1.0 / total.log10());
    total / tau
}

//! Hierarchical model for fold-level differences between two methods.
//!
//! Per dataset `d`, the fold differences are multivariate normal with mean
//! `mu_d` and equicorrelated covariance `sigma_d^2 [(1 - rho) I + rho 11^T]`.
//! Dataset means follow a location-scale Student-t population
//! `t(delta0, sigma0, nu)`. Hyperpriors:
//!
//! ```text
//! delta0 ~ U(-1, 1)          sigma0  ~ U(0, s0_bar)
//! nu - 1 ~ Gamma(alpha, rate = beta)
//! alpha  ~ U(1, 2)           beta    ~ U(0.01, 0.1)
//! sigma_d ~ U(0, sd_bar_d)
//! ```
//!
//! Sampling happens in an unconstrained space with layout
//! `[delta0, sigma0, nu, alpha, beta, mu_1..mu_D, sigma_1..sigma_D]`.
//! Box-bounded parameters use a scaled logistic map (zero maps to the box
//! midpoint), `nu` uses `1 + exp(u)`, and the `mu_d` are left as is.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::results::PairData;
use crate::sampler::LogDensity;

pub const DELTA0_BOUNDS: (f64, f64) = (-1.0, 1.0);
pub const ALPHA_BOUNDS: (f64, f64) = (1.0, 2.0);
pub const BETA_BOUNDS: (f64, f64) = (0.01, 0.1);
pub const DEFAULT_EPSILON: f64 = 0.01;

/// Number of population-level parameters ahead of the per-dataset block.
pub const N_GLOBAL: usize = 5;
pub const IDX_DELTA0: usize = 0;
pub const IDX_SIGMA0: usize = 1;
pub const IDX_NU: usize = 2;
pub const IDX_ALPHA: usize = 3;
pub const IDX_BETA: usize = 4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),
    #[error("parameter `{0}` is outside its support")]
    OutOfSupport(&'static str),
    #[error("log-posterior evaluated to a non-finite value")]
    NonFiniteResult,
    #[error("invalid fold correlation {rho} for K = {k}")]
    InvalidRho { rho: f64, k: usize },
    #[error("expected {expected} unconstrained coordinates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// How the fold correlation is derived from the number of folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoRule {
    /// `rho = 1 / K`
    InverseK,
    /// `rho = 1 / (K - 1)`
    InverseKMinusOne,
    Fixed(f64),
}

impl RhoRule {
    pub fn resolve(self, k: usize) -> Result<f64, ModelError> {
        let rho = match self {
            RhoRule::InverseK => 1.0 / k as f64,
            RhoRule::InverseKMinusOne => 1.0 / (k as f64 - 1.0),
            RhoRule::Fixed(r) => r,
        };
        if (0.0..1.0).contains(&rho) {
            Ok(rho)
        } else {
            Err(ModelError::InvalidRho { rho, k })
        }
    }

    pub fn label(self) -> String {
        match self {
            RhoRule::InverseK => "1/K".into(),
            RhoRule::InverseKMinusOne => "1/(K-1)".into(),
            RhoRule::Fixed(r) => format!("{r}"),
        }
    }
}

impl std::str::FromStr for RhoRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "1/K" | "1/k" | "inverse-k" | "inverse_k" => Ok(RhoRule::InverseK),
            "1/(K-1)" | "1/(k-1)" | "inverse-k-minus-one" | "inverse_k_minus_one" => {
                Ok(RhoRule::InverseKMinusOne)
            }
            other => other
                .parse::<f64>()
                .map(RhoRule::Fixed)
                .map_err(|_| format!("unknown rho rule `{other}` (use 1/K, 1/(K-1) or a number)")),
        }
    }
}

/// Parameterization of the Gamma prior on `nu - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaParam {
    Rate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub rho_rule: RhoRule,
    /// ROPE half-width; used only by the decision layer.
    pub epsilon: f64,
    pub bound_multiplier: f64,
    pub gamma_param: GammaParam,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            rho_rule: RhoRule::InverseK,
            epsilon: DEFAULT_EPSILON,
            bound_multiplier: crate::results::DEFAULT_BOUND_MULTIPLIER,
            gamma_param: GammaParam::Rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub delta0: f64,
    pub sigma0: f64,
    pub nu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ParameterVector {
    /// Flatten in the unconstrained layout order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = vec![self.delta0, self.sigma0, self.nu, self.alpha, self.beta];
        out.extend_from_slice(&self.mu);
        out.extend_from_slice(&self.sigma);
        out
    }

    pub fn from_slice(values: &[f64], n_datasets: usize) -> Result<Self, ModelError> {
        let expected = dim_for(n_datasets);
        if values.len() != expected {
            return Err(ModelError::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            delta0: values[IDX_DELTA0],
            sigma0: values[IDX_SIGMA0],
            nu: values[IDX_NU],
            alpha: values[IDX_ALPHA],
            beta: values[IDX_BETA],
            mu: values[N_GLOBAL..N_GLOBAL + n_datasets].to_vec(),
            sigma: values[N_GLOBAL + n_datasets..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedPoint(pub Vec<f64>);

pub fn dim_for(n_datasets: usize) -> usize {
    N_GLOBAL + 2 * n_datasets
}

/// Parameter names in layout order, with dataset ids inside brackets.
pub fn parameter_names(pair: &PairData) -> Vec<String> {
    let mut names: Vec<String> = ["delta0", "sigma0", "nu", "alpha", "beta"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend(pair.datasets.iter().map(|d| format!("mu[{}]", d.dataset_id)));
    names.extend(pair.datasets.iter().map(|d| format!("sigma[{}]", d.dataset_id)));
    names
}

/// Log density of `N(mu 1, sigma^2 [(1 - rho) I + rho 11^T])` at `x`.
pub fn log_likelihood_dataset(x: &[f64], mu: f64, sigma: f64, rho: f64) -> Result<f64, ModelError> {
    if x.iter().any(|v| !v.is_finite()) || !mu.is_finite() || !sigma.is_finite() || !rho.is_finite() {
        return Err(ModelError::NonFiniteInput("log_likelihood_dataset"));
    }
    if sigma <= 0.0 {
        return Err(ModelError::OutOfSupport("sigma_d"));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(ModelError::InvalidRho { rho, k: x.len() });
    }
    Ok(equicorrelated_terms(x, mu, sigma, rho).0)
}

/// Value, d/dmu and d/dsigma of the equicorrelated normal log density.
#[inline]
fn equicorrelated_terms(x: &[f64], mu: f64, sigma: f64, rho: f64) -> (f64, f64, f64) {
    let k = x.len() as f64;
    let (mut s, mut t) = (0.0, 0.0);
    for &xf in x {
        let r = xf - mu;
        s += r * r;
        t += r;
    }
    let var = sigma * sigma;
    let one_minus = 1.0 - rho;
    let one_plus = 1.0 + (k - 1.0) * rho;
    let log_det = k * var.ln() + (k - 1.0) * one_minus.ln() + one_plus.ln();
    let quad = (s / one_minus - rho * t * t / (one_minus * one_plus)) / var;
    let value = -0.5 * (k * LN_2PI + log_det + quad);
    let d_mu = t / (var * one_plus);
    let d_sigma = (quad - k) / sigma;
    (value, d_mu, d_sigma)
}

/// Log density of the location-scale Student-t `t(delta0, sigma0, nu)` at `mu`.
pub fn log_population(mu: f64, delta0: f64, sigma0: f64, nu: f64) -> Result<f64, ModelError> {
    if ![mu, delta0, sigma0, nu].iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFiniteInput("log_population"));
    }
    if sigma0 <= 0.0 {
        return Err(ModelError::OutOfSupport("sigma0"));
    }
    if nu <= 0.0 {
        return Err(ModelError::OutOfSupport("nu"));
    }
    let z = (mu - delta0) / sigma0;
    Ok(t_normalizer(nu) - sigma0.ln() - 0.5 * (nu + 1.0) * (z * z / nu).ln_1p())
}

/// `lnG((nu+1)/2) - lnG(nu/2) - ln(nu pi)/2`
#[inline]
fn t_normalizer(nu: f64) -> f64 {
    ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * PI).ln()
}

#[inline]
fn t_normalizer_dnu(nu: f64) -> f64 {
    0.5 * digamma(0.5 * (nu + 1.0)) - 0.5 * digamma(0.5 * nu) - 0.5 / nu
}

/// Log density of `Gamma(shape, rate)` at `y`.
pub fn log_gamma_rate(y: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * y.ln() - rate * y
}

fn in_open(x: f64, (lo, hi): (f64, f64)) -> bool {
    x > lo && x < hi
}

/// Log prior density of a constrained parameter vector.
pub fn log_prior(p: &ParameterVector, pair: &PairData, _cfg: &ModelConfig) -> Result<f64, ModelError> {
    let d = pair.n_datasets();
    if p.mu.len() != d || p.sigma.len() != d {
        return Err(ModelError::DimensionMismatch {
            expected: dim_for(d),
            got: N_GLOBAL + p.mu.len() + p.sigma.len(),
        });
    }
    if !p.to_vec().iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFiniteInput("log_prior"));
    }
    if !in_open(p.delta0, DELTA0_BOUNDS) {
        return Err(ModelError::OutOfSupport("delta0"));
    }
    if !in_open(p.sigma0, (0.0, pair.s0_bar)) {
        return Err(ModelError::OutOfSupport("sigma0"));
    }
    if p.nu <= 1.0 {
        return Err(ModelError::OutOfSupport("nu"));
    }
    if !in_open(p.alpha, ALPHA_BOUNDS) {
        return Err(ModelError::OutOfSupport("alpha"));
    }
    if !in_open(p.beta, BETA_BOUNDS) {
        return Err(ModelError::OutOfSupport("beta"));
    }
    for (s, ds) in p.sigma.iter().zip(&pair.datasets) {
        if !in_open(*s, (0.0, ds.sd_bound)) {
            return Err(ModelError::OutOfSupport("sigma_d"));
        }
    }
    let mut lp = uniform_constant(pair);
    lp += log_gamma_rate(p.nu - 1.0, p.alpha, p.beta);
    let norm = t_normalizer(p.nu);
    for &mu in &p.mu {
        let z = (mu - p.delta0) / p.sigma0;
        lp += norm - p.sigma0.ln() - 0.5 * (p.nu + 1.0) * (z * z / p.nu).ln_1p();
    }
    Ok(lp)
}

/// Sum of the log densities of all uniform hyperpriors.
fn uniform_constant(pair: &PairData) -> f64 {
    let width = |(lo, hi): (f64, f64)| (hi - lo).ln();
    -(width(DELTA0_BOUNDS)
        + pair.s0_bar.ln()
        + width(ALPHA_BOUNDS)
        + width(BETA_BOUNDS)
        + pair.datasets.iter().map(|d| d.sd_bound.ln()).sum::<f64>())
}

#[inline]
fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Map `u` into `(lo, hi)`. Returns (value, dvalue/du, log |dvalue/du|).
#[inline]
fn box_forward(u: f64, lo: f64, hi: f64) -> (f64, f64, f64) {
    let s = logistic(u);
    let width = hi - lo;
    let x = if u >= 0.0 {
        hi - width * logistic(-u)
    } else {
        lo + width * s
    };
    let dx = width * s * (1.0 - s);
    let log_jac = width.ln() - softplus(u) - softplus(-u);
    (x, dx, log_jac)
}

#[inline]
fn box_inverse(x: f64, lo: f64, hi: f64) -> f64 {
    (x - lo).ln() - (hi - x).ln()
}

struct Bounds<'a> {
    pair: &'a PairData,
}

impl Bounds<'_> {
    fn of(&self, index: usize) -> Option<(f64, f64)> {
        let d = self.pair.n_datasets();
        match index {
            IDX_DELTA0 => Some(DELTA0_BOUNDS),
            IDX_SIGMA0 => Some((0.0, self.pair.s0_bar)),
            IDX_NU => None,
            IDX_ALPHA => Some(ALPHA_BOUNDS),
            IDX_BETA => Some(BETA_BOUNDS),
            i if i < N_GLOBAL + d => None,
            i => Some((0.0, self.pair.datasets[i - N_GLOBAL - d].sd_bound)),
        }
    }
}

pub fn to_unconstrained(p: &ParameterVector, pair: &PairData) -> Result<UnconstrainedPoint, ModelError> {
    let values = p.to_vec();
    let d = pair.n_datasets();
    if values.len() != dim_for(d) {
        return Err(ModelError::DimensionMismatch {
            expected: dim_for(d),
            got: values.len(),
        });
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFiniteInput("to_unconstrained"));
    }
    let bounds = Bounds { pair };
    let theta = values
        .iter()
        .enumerate()
        .map(|(i, &x)| match (i, bounds.of(i)) {
            (IDX_NU, _) => (x - 1.0).ln(),
            (_, Some((lo, hi))) => box_inverse(x, lo, hi),
            (_, None) => x,
        })
        .collect::<Vec<_>>();
    if theta.iter().all(|v| v.is_finite()) {
        Ok(UnconstrainedPoint(theta))
    } else {
        Err(ModelError::OutOfSupport("to_unconstrained"))
    }
}

/// Inverse transform; also returns the log absolute Jacobian determinant.
pub fn from_unconstrained(theta: &[f64], pair: &PairData) -> Result<(ParameterVector, f64), ModelError> {
    let d = pair.n_datasets();
    if theta.len() != dim_for(d) {
        return Err(ModelError::DimensionMismatch {
            expected: dim_for(d),
            got: theta.len(),
        });
    }
    if !theta.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFiniteInput("from_unconstrained"));
    }
    let mut values = vec![0.0; theta.len()];
    let log_jac = transform_into(theta, pair, &mut values, None, None);
    Ok((ParameterVector::from_slice(&values, d)?, log_jac))
}

/// Fill `values` with constrained parameters and optionally `dx/du` and
/// `d log|J| / du`. Returns log |J|.
fn transform_into(
    theta: &[f64],
    pair: &PairData,
    values: &mut [f64],
    mut dx: Option<&mut [f64]>,
    mut dlogjac: Option<&mut [f64]>,
) -> f64 {
    let bounds = Bounds { pair };
    let mut log_jac = 0.0;
    for (i, &u) in theta.iter().enumerate() {
        let (x, deriv, lj, dlj) = match (i, bounds.of(i)) {
            (IDX_NU, _) => {
                let e = u.exp();
                (1.0 + e, e, u, 1.0)
            }
            (_, Some((lo, hi))) => {
                let (x, deriv, lj) = box_forward(u, lo, hi);
                (x, deriv, lj, 1.0 - 2.0 * logistic(u))
            }
            (_, None) => (u, 1.0, 0.0, 0.0),
        };
        values[i] = x;
        log_jac += lj;
        if let Some(dx) = dx.as_deref_mut() {
            dx[i] = deriv;
        }
        if let Some(g) = dlogjac.as_deref_mut() {
            g[i] = dlj;
        }
    }
    log_jac
}

/// Per-dataset quantities that do not depend on the parameters.
#[derive(Debug, Clone)]
pub struct HierarchicalPosterior {
    pair: PairData,
    rho: Vec<f64>,
    prior_constant: f64,
    names: Vec<String>,
}

impl HierarchicalPosterior {
    pub fn new(pair: &PairData, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let rho = pair
            .datasets
            .iter()
            .map(|d| cfg.rho_rule.resolve(d.folds()))
            .collect::<Result<Vec<_>, _>>()?;
        if pair
            .datasets
            .iter()
            .any(|d| d.differences.iter().any(|x| !x.is_finite()))
        {
            return Err(ModelError::NonFiniteInput("fold differences"));
        }
        Ok(Self {
            prior_constant: uniform_constant(pair),
            names: parameter_names(pair),
            rho,
            pair: pair.clone(),
        })
    }

    pub fn pair(&self) -> &PairData {
        &self.pair
    }

    /// Fold correlation used for each dataset.
    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    /// Log posterior (up to the evidence) and its gradient in unconstrained
    /// coordinates. `grad` must have the model's dimension.
    pub fn eval(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64, ModelError> {
        let d = self.pair.n_datasets();
        let dim = dim_for(d);
        if theta.len() != dim || grad.len() != dim {
            return Err(ModelError::DimensionMismatch {
                expected: dim,
                got: theta.len().min(grad.len()),
            });
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFiniteInput("theta"));
        }
        let mut x = vec![0.0; dim];
        let mut dx = vec![0.0; dim];
        let log_jac = transform_into(theta, &self.pair, &mut x, Some(&mut dx), Some(grad));
        // `grad` now holds d log|J| / du; accumulate d logp / dx separately.
        let mut gx = vec![0.0; dim];

        let (delta0, sigma0, nu, alpha, beta) = (
            x[IDX_DELTA0],
            x[IDX_SIGMA0],
            x[IDX_NU],
            x[IDX_ALPHA],
            x[IDX_BETA],
        );
        let mut lp = self.prior_constant + log_jac;

        // nu - 1 ~ Gamma(alpha, rate = beta)
        let y = nu - 1.0;
        let ln_y = theta[IDX_NU];
        let ln_beta = beta.ln();
        lp += alpha * ln_beta - ln_gamma(alpha) + (alpha - 1.0) * ln_y - beta * y;
        gx[IDX_NU] += (alpha - 1.0) / y - beta;
        gx[IDX_ALPHA] += ln_beta - digamma(alpha) + ln_y;
        gx[IDX_BETA] += alpha / beta - y;

        // mu_d ~ t(delta0, sigma0, nu)
        if d > 0 {
            let df = d as f64;
            lp += df * (t_normalizer(nu) - sigma0.ln());
            gx[IDX_NU] += df * t_normalizer_dnu(nu);
            gx[IDX_SIGMA0] -= df / sigma0;
        }
        for k in 0..d {
            let mu = x[N_GLOBAL + k];
            let z = (mu - delta0) / sigma0;
            let z2 = z * z;
            let denom = nu + z2;
            lp -= 0.5 * (nu + 1.0) * (z2 / nu).ln_1p();
            let dz = (nu + 1.0) * z / (sigma0 * denom);
            gx[N_GLOBAL + k] -= dz;
            gx[IDX_DELTA0] += dz;
            gx[IDX_SIGMA0] += (nu + 1.0) * z2 / (sigma0 * denom);
            gx[IDX_NU] += -0.5 * (z2 / nu).ln_1p() + 0.5 * (nu + 1.0) * z2 / (nu * denom);
        }

        // x_d ~ N(mu_d 1, Sigma_d)
        for (k, ds) in self.pair.datasets.iter().enumerate() {
            let (value, d_mu, d_sigma) =
                equicorrelated_terms(&ds.differences, x[N_GLOBAL + k], x[N_GLOBAL + d + k], self.rho[k]);
            lp += value;
            gx[N_GLOBAL + k] += d_mu;
            gx[N_GLOBAL + d + k] += d_sigma;
        }

        for i in 0..dim {
            grad[i] += gx[i] * dx[i];
        }
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            Ok(lp)
        } else {
            Err(ModelError::NonFiniteResult)
        }
    }
}

impl LogDensity for HierarchicalPosterior {
    fn dim(&self) -> usize {
        dim_for(self.pair.n_datasets())
    }

    fn log_density_and_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(position, grad).unwrap_or(f64::NAN)
    }

    fn parameter_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn constrain(&self, position: &[f64]) -> Vec<f64> {
        let mut values = vec![0.0; position.len()];
        transform_into(position, &self.pair, &mut values, None, None);
        values
    }
}

/// The hierarchical posterior in the coordinates used for sampling.
///
/// Each dataset mean is written as `mu_d = m_d + sqrt(v_d) * xi_d`, where
/// `m_d` and `v_d` are the mean and variance of `mu_d` given the other
/// parameters under a normal approximation of the population term:
/// precision `1/v_d = K_d / (sigma_d^2 (1 + (K_d - 1) rho_d)) + 1/sigma0^2`.
/// The target distribution is unchanged (the Jacobian is included) but the
/// geometry no longer pinches as `sigma0` or `sigma_d` shrink. Stored draws
/// are the constrained `mu_d`.
#[derive(Debug, Clone)]
pub struct SamplingPosterior {
    inner: HierarchicalPosterior,
    /// Fold means.
    xbar: Vec<f64>,
    /// `(1 + (K - 1) rho) / K` per dataset.
    se_factor: Vec<f64>,
}

/// Intermediate quantities of the sampling transform.
struct Conditional {
    centered: Vec<f64>,
    delta0: f64,
    sigma0: f64,
    ddelta0: f64,
    dsigma0: f64,
    sigma: Vec<f64>,
    dsigma: Vec<f64>,
}

impl SamplingPosterior {
    pub fn new(pair: &PairData, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let inner = HierarchicalPosterior::new(pair, cfg)?;
        let se_factor = pair
            .datasets
            .iter()
            .zip(inner.rho())
            .map(|(ds, &rho)| {
                let k = ds.folds() as f64;
                (1.0 + (k - 1.0) * rho) / k
            })
            .collect();
        Ok(Self {
            xbar: pair.dataset_means(),
            se_factor,
            inner,
        })
    }

    pub fn inner(&self) -> &HierarchicalPosterior {
        &self.inner
    }

    /// Precision pieces `(a, b, P)` for dataset `k`: likelihood precision,
    /// population precision and their sum.
    #[inline]
    fn precisions(&self, k: usize, sigma: f64, sigma0: f64) -> (f64, f64, f64) {
        let a = 1.0 / (self.se_factor[k] * sigma * sigma);
        let b = 1.0 / (sigma0 * sigma0);
        (a, b, a + b)
    }

    fn transform(&self, theta: &[f64]) -> Conditional {
        let pair = &self.inner.pair;
        let d = pair.n_datasets();
        let (delta0, ddelta0, _) = box_forward(theta[IDX_DELTA0], DELTA0_BOUNDS.0, DELTA0_BOUNDS.1);
        let (sigma0, dsigma0, _) = box_forward(theta[IDX_SIGMA0], 0.0, pair.s0_bar);
        let mut centered = theta.to_vec();
        let mut sigma = Vec::with_capacity(d);
        let mut dsigma = Vec::with_capacity(d);
        for (k, ds) in pair.datasets.iter().enumerate() {
            let (s, ds_du, _) = box_forward(theta[N_GLOBAL + d + k], 0.0, ds.sd_bound);
            let (a, b, p) = self.precisions(k, s, sigma0);
            let m = (a * self.xbar[k] + b * delta0) / p;
            centered[N_GLOBAL + k] = m + theta[N_GLOBAL + k] / p.sqrt();
            sigma.push(s);
            dsigma.push(ds_du);
        }
        Conditional {
            centered,
            delta0,
            sigma0,
            ddelta0,
            dsigma0,
            sigma,
            dsigma,
        }
    }

    pub fn eval(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64, ModelError> {
        let d = self.inner.pair.n_datasets();
        if theta.len() != dim_for(d) || grad.len() != dim_for(d) {
            return Err(ModelError::DimensionMismatch {
                expected: dim_for(d),
                got: theta.len().min(grad.len()),
            });
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFiniteInput("theta"));
        }
        let c = self.transform(theta);
        let mut lp = self.inner.eval(&c.centered, grad)?;
        let mut g_sigma0 = 0.0;
        for k in 0..d {
            let xi = theta[N_GLOBAL + k];
            let (a, b, p) = self.precisions(k, c.sigma[k], c.sigma0);
            let m = c.centered[N_GLOBAL + k] - xi / p.sqrt();
            // log Jacobian of xi -> mu is -ln(P) / 2
            lp -= 0.5 * p.ln();
            let g_mu = grad[N_GLOBAL + k];
            let xi_term = 0.5 * xi * p.powf(-1.5);
            let dmu_da = (self.xbar[k] - m) / p - xi_term;
            let dmu_db = (c.delta0 - m) / p - xi_term;
            let dlj = -0.5 / p;
            grad[IDX_DELTA0] += g_mu * (b / p) * c.ddelta0;
            g_sigma0 += (g_mu * dmu_db + dlj) * (-2.0 * b / c.sigma0);
            grad[N_GLOBAL + d + k] += (g_mu * dmu_da + dlj) * (-2.0 * a / c.sigma[k]) * c.dsigma[k];
            grad[N_GLOBAL + k] = g_mu / p.sqrt();
        }
        grad[IDX_SIGMA0] += g_sigma0 * c.dsigma0;
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            Ok(lp)
        } else {
            Err(ModelError::NonFiniteResult)
        }
    }
}

impl LogDensity for SamplingPosterior {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn log_density_and_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(position, grad).unwrap_or(f64::NAN)
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.parameter_names()
    }

    fn constrain(&self, position: &[f64]) -> Vec<f64> {
        self.inner.constrain(&self.transform(position).centered)
    }
}

/// Log posterior and gradient at an unconstrained point.
pub fn log_posterior_and_grad(
    theta: &UnconstrainedPoint,
    pair: &PairData,
    cfg: &ModelConfig,
) -> Result<(f64, Vec<f64>), ModelError> {
    let post = HierarchicalPosterior::new(pair, cfg)?;
    let mut grad = vec![0.0; theta.0.len()];
    let lp = post.eval(&theta.0, &mut grad)?;
    Ok((lp, grad))
}

/// The hierarchical model with `sigma0`, `nu` and every `sigma_d` held
/// fixed, leaving `delta0` and the dataset means free.
///
/// Unconstrained layout: `[delta0, mu_1..mu_D]`, with `delta0` on the
/// logistic scale of (-1, 1).
#[derive(Debug, Clone)]
pub struct FixedScalesPosterior {
    data: Vec<Vec<f64>>,
    rho: Vec<f64>,
    sigma: Vec<f64>,
    sigma0: f64,
    nu: f64,
}

impl FixedScalesPosterior {
    pub fn new(pair: &PairData, rho_rule: RhoRule, sigma0: f64, nu: f64, sigma: Vec<f64>) -> Result<Self, ModelError> {
        if sigma.len() != pair.n_datasets() {
            return Err(ModelError::DimensionMismatch {
                expected: pair.n_datasets(),
                got: sigma.len(),
            });
        }
        if !(sigma0 > 0.0) || sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(ModelError::OutOfSupport("scale"));
        }
        if !(nu > 0.0) {
            return Err(ModelError::OutOfSupport("nu"));
        }
        let rho = pair
            .datasets
            .iter()
            .map(|d| rho_rule.resolve(d.folds()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            data: pair.datasets.iter().map(|d| d.differences.clone()).collect(),
            rho,
            sigma,
            sigma0,
            nu,
        })
    }

    pub fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.data.len();
        let (delta0, ddelta, log_jac) = box_forward(theta[0], DELTA0_BOUNDS.0, DELTA0_BOUNDS.1);
        let mut lp = -LN_2 + log_jac;
        grad[0] = 1.0 - 2.0 * logistic(theta[0]);
        let mut g_delta = 0.0;
        let nu = self.nu;
        let norm = t_normalizer(nu) - self.sigma0.ln();
        for k in 0..d {
            let mu = theta[1 + k];
            let z = (mu - delta0) / self.sigma0;
            let z2 = z * z;
            lp += norm - 0.5 * (nu + 1.0) * (z2 / nu).ln_1p();
            let dz = (nu + 1.0) * z / (self.sigma0 * (nu + z2));
            g_delta += dz;
            let (value, d_mu, _) = equicorrelated_terms(&self.data[k], mu, self.sigma[k], self.rho[k]);
            lp += value;
            grad[1 + k] = d_mu - dz;
        }
        grad[0] += g_delta * ddelta;
        lp
    }
}

impl LogDensity for FixedScalesPosterior {
    fn dim(&self) -> usize {
        1 + self.data.len()
    }

    fn log_density_and_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(position, grad)
    }

    fn parameter_names(&self) -> Vec<String> {
        std::iter::once("delta0".to_string())
            .chain((0..self.data.len()).map(|k| format!("mu[{k}]")))
            .collect()
    }

    fn constrain(&self, position: &[f64]) -> Vec<f64> {
        let mut out = position.to_vec();
        out[0] = box_forward(position[0], DELTA0_BOUNDS.0, DELTA0_BOUNDS.1).0;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::results::population_scales;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_pair(n_datasets: usize, k: usize, seed: u64) -> PairData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n_datasets)
            .map(|d| {
                let shift = rng.random_range(-0.05..0.05);
                let diffs = (0..k).map(|_| shift + rng.random_range(-0.02..0.02)).collect();
                (format!("ds{d}"), diffs)
            })
            .collect();
        population_scales(PairData::from_differences("i", "j", data), 1000.0).unwrap()
    }

    fn midpoint(pair: &PairData) -> ParameterVector {
        ParameterVector {
            delta0: 0.0,
            sigma0: pair.s0_bar / 2.0,
            nu: 2.0,
            alpha: 1.5,
            beta: 0.055,
            mu: vec![0.0; pair.n_datasets()],
            sigma: pair.datasets.iter().map(|d| d.sd_bound / 2.0).collect(),
        }
    }

    /// Dense multivariate normal log density via an explicit Cholesky factor.
    fn dense_oracle(x: &[f64], mu: f64, sigma: f64, rho: f64) -> f64 {
        let k = x.len();
        let cov = nalgebra::DMatrix::from_fn(k, k, |a, b| {
            sigma * sigma * if a == b { 1.0 } else { rho }
        });
        let chol = cov.cholesky().unwrap();
        let r = nalgebra::DVector::from_fn(k, |i, _| x[i] - mu);
        let w = chol.l().solve_lower_triangular(&r).unwrap();
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (k as f64 * (2.0 * PI).ln() + log_det + w.dot(&w))
    }

    #[test]
    fn standard_normal_at_mode() {
        let v = log_likelihood_dataset(&[0.0], 0.0, 1.0, 0.0).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn matches_dense_oracle_on_reference_case() {
        let x = [0.012, 0.009, 0.015, 0.007, 0.011];
        let closed = log_likelihood_dataset(&x, 0.01, 0.05, 0.2).unwrap();
        let dense = dense_oracle(&x, 0.01, 0.05, 0.2);
        assert!((closed - dense).abs() <= 1e-10, "{closed} vs {dense}");
    }

    #[test]
    fn zero_correlation_is_independent_normals() {
        let x = [0.3, -0.2, 0.05, 0.11];
        let (mu, sigma): (f64, f64) = (0.02, 0.4);
        let indep: f64 = x
            .iter()
            .map(|v| -0.5 * LN_2PI - sigma.ln() - 0.5 * ((v - mu) / sigma).powi(2))
            .sum();
        let v = log_likelihood_dataset(&x, mu, sigma, 0.0).unwrap();
        assert!((v - indep).abs() <= 1e-12);
    }

    #[test]
    fn likelihood_rejects_bad_input() {
        assert!(matches!(
            log_likelihood_dataset(&[f64::NAN], 0.0, 1.0, 0.0),
            Err(ModelError::NonFiniteInput(_))
        ));
        assert!(log_likelihood_dataset(&[0.0, 0.0], 0.0, 1.0, 1.0).is_err());
        assert!(log_population(f64::INFINITY, 0.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn cauchy_mode_and_symmetry() {
        let v = log_population(0.3, 0.3, 1.0, 1.0).unwrap();
        assert!((v - (1.0 / PI).ln()).abs() < 1e-14);
        // dyadic offsets keep mu - delta0 exact in both directions
        for c in [0.125, 0.75, 3.0] {
            let a = log_population(0.25 + c, 0.25, 0.5, 4.0).unwrap();
            let b = log_population(0.25 - c, 0.25, 0.5, 4.0).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn student_t_reference_value() {
        // ln(8 / (3 pi sqrt(5) (9/5)^3)), evaluated at 30 digits with mpmath
        let v = log_population(2.0, 0.0, 1.0, 5.0).unwrap();
        assert!((v - (-2.731_979_583_761_081_1)).abs() < 1e-13, "{v}");
    }

    #[test]
    fn gamma_rate_reference_value() {
        // 1.5 ln 0.05 - lnG(1.5) + 0.5 ln 30 - 1.5, evaluated with mpmath
        let v = log_gamma_rate(30.0, 1.5, 0.05);
        assert!((v - (-4.172_217_481_864_663_6)).abs() < 1e-13, "{v}");
    }

    #[test]
    fn prior_support_checks() {
        let pair = toy_pair(3, 5, 1);
        let mut p = midpoint(&pair);
        let cfg = ModelConfig::default();
        assert!(log_prior(&p, &pair, &cfg).unwrap().is_finite());
        p.delta0 = 1.5;
        assert_eq!(log_prior(&p, &pair, &cfg), Err(ModelError::OutOfSupport("delta0")));
    }

    #[test]
    fn prior_at_midpoints_is_sum_of_terms() {
        let pair = toy_pair(2, 5, 2);
        let p = midpoint(&pair);
        let expected = -(2f64.ln() + pair.s0_bar.ln() + 0.09f64.ln())
            - pair.datasets.iter().map(|d| d.sd_bound.ln()).sum::<f64>()
            + log_gamma_rate(p.nu - 1.0, p.alpha, p.beta)
            + p.mu.iter().map(|&m| log_population(m, p.delta0, p.sigma0, p.nu).unwrap()).sum::<f64>();
        let v = log_prior(&p, &pair, &ModelConfig::default()).unwrap();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn midpoint_maps_to_zero() {
        let pair = toy_pair(2, 5, 3);
        let theta = to_unconstrained(&midpoint(&pair), &pair).unwrap();
        assert_eq!(theta.0[IDX_DELTA0], 0.0);
        assert!(theta.0[IDX_ALPHA].abs() < 1e-15);
        let (back, _) = from_unconstrained(&vec![0.0; theta.0.len()], &pair).unwrap();
        assert_eq!(back.delta0, 0.0);
        assert_eq!(back.alpha, 1.5);
    }

    fn random_support_point(pair: &PairData, rng: &mut impl Rng) -> ParameterVector {
        let inside = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| {
            let w = hi - lo;
            lo + w * (1e-3 + (1.0 - 2e-3) * rng.random::<f64>())
        };
        ParameterVector {
            delta0: inside(rng, -1.0, 1.0),
            sigma0: inside(rng, 0.0, pair.s0_bar),
            nu: 1.0 + (rng.random_range(-3.0..5.0f64)).exp(),
            alpha: inside(rng, 1.0, 2.0),
            beta: inside(rng, 0.01, 0.1),
            mu: (0..pair.n_datasets()).map(|_| rng.random_range(-0.5..0.5)).collect(),
            sigma: pair.datasets.iter().map(|d| inside(rng, 0.0, d.sd_bound)).collect(),
        }
    }

    #[test]
    fn transform_round_trip() {
        let pair = toy_pair(4, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let p = random_support_point(&pair, &mut rng);
            let theta = to_unconstrained(&p, &pair).unwrap();
            let (back, _) = from_unconstrained(&theta.0, &pair).unwrap();
            for (a, b) in p.to_vec().iter().zip(back.to_vec()) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst <= 1e-12, "max round-trip error {worst}");
    }

    #[test]
    fn log_jacobian_matches_finite_differences() {
        let pair = toy_pair(2, 5, 5);
        let n = dim_for(2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (_, log_jac) = from_unconstrained(&theta, &pair).unwrap();
            let h = 1e-6;
            let mut jac = nalgebra::DMatrix::zeros(n, n);
            for j in 0..n {
                let mut up = theta.clone();
                let mut down = theta.clone();
                up[j] += h;
                down[j] -= h;
                let a = from_unconstrained(&up, &pair).unwrap().0.to_vec();
                let b = from_unconstrained(&down, &pair).unwrap().0.to_vec();
                for i in 0..n {
                    jac[(i, j)] = (a[i] - b[i]) / (2.0 * h);
                }
            }
            let fd = jac.determinant().abs().ln();
            assert!((fd - log_jac).abs() <= 1e-6, "{fd} vs {log_jac}");
        }
    }

    fn check_gradient(post: &impl LogDensity, theta: &[f64]) -> f64 {
        let n = theta.len();
        let mut grad = vec![0.0; n];
        post.log_density_and_grad(theta, &mut grad);
        let mut scratch = vec![0.0; n];
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..n {
            let mut up = theta.to_vec();
            let mut down = theta.to_vec();
            up[i] += h;
            down[i] -= h;
            let fd = (post.log_density_and_grad(&up, &mut scratch)
                - post.log_density_and_grad(&down, &mut scratch))
                / (2.0 * h);
            let err = (fd - grad[i]).abs() / grad[i].abs().max(1.0);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let pair = toy_pair(3, 5, 6);
        let post = HierarchicalPosterior::new(&pair, &ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let p = random_support_point(&pair, &mut rng);
            let theta = to_unconstrained(&p, &pair).unwrap();
            let err = check_gradient(&post, &theta.0);
            assert!(err <= 1e-5, "gradient error {err}");
        }
    }

    #[test]
    fn sampling_coordinates_gradient_and_density() {
        let pair = toy_pair(3, 5, 6);
        let cfg = ModelConfig::default();
        let post = SamplingPosterior::new(&pair, &cfg).unwrap();
        let centered = HierarchicalPosterior::new(&pair, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let theta: Vec<f64> = (0..dim_for(3)).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert!(check_gradient(&post, &theta) <= 1e-5);
            // density differs from the centered one by the log Jacobian of xi -> mu
            let mapped = post.transform(&theta).centered;
            let h = 1e-6;
            let mut log_jac = 0.0;
            for k in 0..3 {
                let mut up = theta.clone();
                up[N_GLOBAL + k] += h;
                let mut down = theta.clone();
                down[N_GLOBAL + k] -= h;
                let dmu = (post.transform(&up).centered[N_GLOBAL + k] - post.transform(&down).centered[N_GLOBAL + k]) / (2.0 * h);
                log_jac += dmu.ln();
            }
            let mut g = vec![0.0; theta.len()];
            let a = post.eval(&theta, &mut g).unwrap();
            let b = centered.eval(&mapped, &mut g).unwrap();
            assert!((a - b - log_jac).abs() < 1e-6, "{a} {b} {log_jac}");
            assert_eq!(post.constrain(&theta), centered.constrain(&mapped));
        }
    }

    #[test]
    fn fixed_scale_gradient_matches_finite_differences() {
        let pair = toy_pair(4, 5, 7);
        let post = FixedScalesPosterior::new(&pair, RhoRule::InverseK, 0.03, 4.0, vec![0.02; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let theta: Vec<f64> = (0..5).map(|_| rng.random_range(-0.1..0.1)).collect();
            assert!(check_gradient(&post, &theta) <= 1e-5);
        }
    }

    #[test]
    fn no_datasets_means_prior_only() {
        let pair = PairData {
            s0_bar: 1.0,
            ..PairData::from_differences("i", "j", vec![])
        };
        let cfg = ModelConfig::default();
        let theta = UnconstrainedPoint(vec![0.1, -0.3, 0.5, 0.2, -0.4]);
        let (lp, grad) = log_posterior_and_grad(&theta, &pair, &cfg).unwrap();
        let (p, log_jac) = from_unconstrained(&theta.0, &pair).unwrap();
        let prior = log_prior(&p, &pair, &cfg).unwrap();
        assert!((lp - (prior + log_jac)).abs() < 1e-12);
        // delta0 only enters through its uniform prior and the Jacobian
        assert!((grad[IDX_DELTA0] - (1.0 - 2.0 * logistic(0.1))).abs() < 1e-15);
    }

    #[test]
    fn posterior_sums_its_parts() {
        let pair = toy_pair(3, 5, 8);
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = random_support_point(&pair, &mut rng);
        let theta = to_unconstrained(&p, &pair).unwrap();
        let (lp, _) = log_posterior_and_grad(&theta, &pair, &cfg).unwrap();
        let (q, log_jac) = from_unconstrained(&theta.0, &pair).unwrap();
        let mut expected = log_prior(&q, &pair, &cfg).unwrap() + log_jac;
        for (k, ds) in pair.datasets.iter().enumerate() {
            expected += log_likelihood_dataset(&ds.differences, q.mu[k], q.sigma[k], 0.2).unwrap();
        }
        assert!((lp - expected).abs() < 1e-9 * lp.abs().max(1.0));
    }

    #[test]
    fn sign_flip_leaves_posterior_unchanged() {
        let pair = toy_pair(3, 5, 9);
        let mut flipped = pair.clone();
        for d in &mut flipped.datasets {
            d.differences.iter_mut().for_each(|x| *x = -*x);
        }
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..10 {
            let p = random_support_point(&pair, &mut rng);
            let mut q = p.clone();
            q.delta0 = -p.delta0;
            q.mu.iter_mut().for_each(|m| *m = -*m);
            let a = log_posterior_and_grad(&to_unconstrained(&p, &pair).unwrap(), &pair, &cfg).unwrap().0;
            let b = log_posterior_and_grad(&to_unconstrained(&q, &flipped).unwrap(), &flipped, &cfg).unwrap().0;
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn dataset_permutation_invariance() {
        let pair = toy_pair(3, 5, 10);
        let mut permuted = pair.clone();
        permuted.datasets.reverse();
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = random_support_point(&pair, &mut rng);
        let mut q = p.clone();
        q.mu.reverse();
        q.sigma.reverse();
        let a = log_posterior_and_grad(&to_unconstrained(&p, &pair).unwrap(), &pair, &cfg).unwrap().0;
        let b = log_posterior_and_grad(&to_unconstrained(&q, &permuted).unwrap(), &permuted, &cfg).unwrap().0;
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn rho_rules() {
        assert_eq!(RhoRule::InverseK.resolve(5).unwrap(), 0.2);
        assert_eq!(RhoRule::InverseKMinusOne.resolve(5).unwrap(), 0.25);
        assert!(RhoRule::InverseKMinusOne.resolve(2).is_err());
        assert_eq!("1/(K-1)".parse::<RhoRule>().unwrap(), RhoRule::InverseKMinusOne);
        assert_eq!("0.3".parse::<RhoRule>().unwrap(), RhoRule::Fixed(0.3));
    }
}

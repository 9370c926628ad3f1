//! Multi-chain NUTS with warmup adaptation, diagnostics and a retry ladder.

mod adapt;
pub mod diagnostics;
mod nuts;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, SamplingPosterior};
use crate::results::PairData;
use crate::seed::{derive_seed, derive_seed_str};

use adapt::{DualAveraging, MetricAdaptation};
pub use diagnostics::{compute_diagnostics, Diagnostics, DiagnosticsError};
use nuts::PhasePoint;
pub use nuts::MAX_DELTA_H;

const INIT_ATTEMPTS: usize = 100;
const INIT_SD: f64 = 0.1;

/// Target acceptance rates tried in order by the retry ladder.
pub const RETRY_LADDER: [f64; 3] = [0.8, 0.95, 0.99];

/// A differentiable log density over an unconstrained space.
///
/// Returning a non-finite value marks the point as unusable; during
/// sampling this is treated as a divergence.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    fn log_density_and_grad(&self, position: &[f64], grad: &mut [f64]) -> f64;

    fn parameter_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("theta[{i}]")).collect()
    }

    /// Map an unconstrained position to the values that get stored.
    fn constrain(&self, position: &[f64]) -> Vec<f64> {
        position.to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub target_accept: f64,
    pub max_treedepth: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 2000,
            draws: 4000,
            target_accept: 0.8,
            max_treedepth: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("chain {chain}: no finite starting point in {attempts} attempts")]
    InitializationFailure { chain: usize, attempts: usize },
    #[error("every post-warmup transition diverged")]
    AllChainsDiverged,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}

/// Post-warmup draws in constrained space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub parameter_names: Vec<String>,
    pub n_chains: usize,
    pub n_draws: usize,
    /// Chain-major, then draw, then parameter.
    pub values: Vec<f64>,
    /// One flag per stored transition, same chain-major order.
    pub divergent: Vec<bool>,
    pub treedepth_hit: Vec<bool>,
    /// Adapted step size per chain.
    pub step_sizes: Vec<f64>,
    pub config: SamplerConfig,
}

impl PosteriorDraws {
    pub fn n_params(&self) -> usize {
        self.parameter_names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.parameter_names.iter().position(|n| n == name)
    }

    pub fn get(&self, chain: usize, draw: usize, param: usize) -> f64 {
        self.values[(chain * self.n_draws + draw) * self.n_params() + param]
    }

    /// Draws of one parameter, split by chain.
    pub fn chains_for(&self, param: usize) -> Vec<Vec<f64>> {
        (0..self.n_chains)
            .map(|c| (0..self.n_draws).map(|i| self.get(c, i, param)).collect())
            .collect()
    }

    /// Draws of one parameter pooled over chains, chain-major.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let p = self.index_of(name)?;
        Some(self.values.iter().skip(p).step_by(self.n_params()).copied().collect())
    }

    pub fn total_draws(&self) -> usize {
        self.n_chains * self.n_draws
    }

    pub fn n_divergent(&self) -> usize {
        self.divergent.iter().filter(|&&d| d).count()
    }

    pub fn n_treedepth(&self) -> usize {
        self.treedepth_hit.iter().filter(|&&d| d).count()
    }

    /// CSV dump with header `chain,draw,<parameter names>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("chain,draw");
        for name in &self.parameter_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for c in 0..self.n_chains {
            for i in 0..self.n_draws {
                out.push_str(&format!("{c},{i}"));
                for p in 0..self.n_params() {
                    out.push_str(&format!(",{}", self.get(c, i, p)));
                }
                out.push('\n');
            }
        }
        out
    }
}

struct ChainOutput {
    values: Vec<f64>,
    divergent: Vec<bool>,
    treedepth_hit: Vec<bool>,
    step_size: f64,
}

fn run_chain<L: LogDensity + ?Sized>(target: &L, cfg: &SamplerConfig, chain: usize) -> Result<ChainOutput, SamplerError> {
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, chain as u64));
    let init_dist = Normal::new(0.0, INIT_SD).expect("valid normal");

    let mut state = None;
    for _ in 0..INIT_ATTEMPTS {
        let q: Vec<f64> = (0..dim).map(|_| init_dist.sample(&mut rng)).collect();
        if let Some(z) = PhasePoint::at(target, q) {
            state = Some(z);
            break;
        }
    }
    let mut z = state.ok_or(SamplerError::InitializationFailure {
        chain,
        attempts: INIT_ATTEMPTS,
    })?;

    let mut inv_metric = vec![1.0; dim];
    let mut eps = nuts::initial_step_size(target, &z, &inv_metric, 1.0, &mut rng);
    let mut step_adapt = DualAveraging::new(cfg.target_accept, eps);
    let mut metric_adapt = MetricAdaptation::new(dim, cfg.warmup);

    for _ in 0..cfg.warmup {
        let info = nuts::transition(target, &mut z, &inv_metric, eps, cfg.max_treedepth, &mut rng);
        eps = step_adapt.learn(info.accept_stat);
        if metric_adapt.observe(&z.q, &mut inv_metric) {
            eps = nuts::initial_step_size(target, &z, &inv_metric, eps, &mut rng);
            step_adapt.restart(eps);
        }
    }
    if cfg.warmup > 0 {
        eps = step_adapt.final_step_size();
    }

    let n_params = target.parameter_names().len();
    let mut out = ChainOutput {
        values: Vec::with_capacity(cfg.draws * n_params),
        divergent: Vec::with_capacity(cfg.draws),
        treedepth_hit: Vec::with_capacity(cfg.draws),
        step_size: eps,
    };
    for _ in 0..cfg.draws {
        let info = nuts::transition(target, &mut z, &inv_metric, eps, cfg.max_treedepth, &mut rng);
        out.values.extend(target.constrain(&z.q));
        out.divergent.push(info.divergent);
        out.treedepth_hit.push(info.treedepth_hit);
    }
    Ok(out)
}

/// Run `cfg.chains` independent chains. Each chain draws from its own
/// random stream derived from `(cfg.seed, chain index)`, so the result does
/// not depend on how chains are scheduled.
pub fn run_nuts<L: LogDensity + ?Sized>(target: &L, cfg: &SamplerConfig) -> Result<PosteriorDraws, SamplerError> {
    if target.dim() == 0 {
        return Err(SamplerError::InvalidConfig("dimension must be at least 1".into()));
    }
    if cfg.chains == 0 || cfg.draws == 0 {
        return Err(SamplerError::InvalidConfig("chains and draws must be positive".into()));
    }
    if !(cfg.target_accept > 0.0 && cfg.target_accept < 1.0) {
        return Err(SamplerError::InvalidConfig(format!(
            "target_accept {} outside (0, 1)",
            cfg.target_accept
        )));
    }
    if cfg.max_treedepth == 0 {
        return Err(SamplerError::InvalidConfig("max_treedepth must be positive".into()));
    }

    let outputs = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(target, cfg, c))
        .collect::<Result<Vec<_>, _>>()?;

    if outputs.iter().all(|o| o.divergent.iter().all(|&d| d)) {
        return Err(SamplerError::AllChainsDiverged);
    }

    let mut draws = PosteriorDraws {
        parameter_names: target.parameter_names(),
        n_chains: cfg.chains,
        n_draws: cfg.draws,
        values: Vec::new(),
        divergent: Vec::new(),
        treedepth_hit: Vec::new(),
        step_sizes: Vec::new(),
        config: cfg.clone(),
    };
    for o in outputs {
        draws.values.extend(o.values);
        draws.divergent.extend(o.divergent);
        draws.treedepth_hit.extend(o.treedepth_hit);
        draws.step_sizes.push(o.step_size);
    }
    Ok(draws)
}

/// A fit together with its diagnostics and the number of attempts used.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub draws: PosteriorDraws,
    pub diagnostics: Diagnostics,
    pub attempts: usize,
}

/// Sampler configuration for a retry rung (0-based).
pub fn ladder_config(base: &SamplerConfig, rung: usize) -> SamplerConfig {
    let mut cfg = base.clone();
    cfg.target_accept = base.target_accept.max(RETRY_LADDER[rung.min(RETRY_LADDER.len() - 1)]);
    if rung > 0 {
        cfg.seed = derive_seed_str(base.seed, &format!("retry-{rung}"));
    }
    if rung + 1 == RETRY_LADDER.len() {
        cfg.warmup = base.warmup * 2;
        cfg.draws = base.draws * 2;
    }
    cfg
}

/// Run `fit` up the retry ladder until the diagnostics pass. The last
/// attempt is returned with `pass = false` if no rung passes.
pub fn retry_with<F>(base: &SamplerConfig, mut fit: F) -> Result<FitOutcome, SamplerError>
where
    F: FnMut(&SamplerConfig) -> Result<PosteriorDraws, SamplerError>,
{
    let mut last = None;
    for rung in 0..RETRY_LADDER.len() {
        let draws = fit(&ladder_config(base, rung))?;
        let diagnostics = compute_diagnostics(&draws)?;
        let pass = diagnostics.pass;
        last = Some(FitOutcome {
            draws,
            diagnostics,
            attempts: rung + 1,
        });
        if pass {
            break;
        }
    }
    Ok(last.expect("ladder has at least one rung"))
}

/// Fit any target with the retry ladder.
pub fn fit_target_with_retry<L: LogDensity + ?Sized>(target: &L, base: &SamplerConfig) -> Result<FitOutcome, SamplerError> {
    retry_with(base, |cfg| run_nuts(target, cfg))
}

/// Fit the hierarchical model for one comparison with the retry ladder.
///
/// Sampling runs in the coordinates of [`SamplingPosterior`]; stored draws
/// are the model parameters.
pub fn fit_with_retry(pair: &PairData, model_cfg: &ModelConfig, base: &SamplerConfig) -> Result<FitOutcome, SamplerError> {
    let posterior = SamplingPosterior::new(pair, model_cfg)?;
    fit_target_with_retry(&posterior, base)
}

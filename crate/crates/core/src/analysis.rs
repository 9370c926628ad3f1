//! One comparison end to end: scales, fit with retries, decision summary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::{DecisionError, DecisionSummary, KeyDraws};
use crate::model::ModelConfig;
use crate::results::{population_scales, PairData, ResultsError};
use crate::sampler::{fit_with_retry, PosteriorDraws, SamplerConfig, SamplerError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Results(#[from] ResultsError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Decision(#[from] DecisionError),
}

/// Convergence figures over the key parameters of the accepted attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    #[serde(with = "crate::report::nan_as_null")]
    pub max_rhat: f64,
    #[serde(with = "crate::report::nan_as_null")]
    pub min_ess_bulk: f64,
    #[serde(with = "crate::report::nan_as_null")]
    pub min_ess_tail: f64,
    pub n_divergent: usize,
    pub n_treedepth: usize,
    pub attempts: usize,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct ComparisonFit {
    pub pair: PairData,
    pub draws: PosteriorDraws,
    pub summary: DecisionSummary,
    pub diagnostics: FitDiagnostics,
}

/// Fit one comparison. `raw` may have its scales unset; they are recomputed
/// from the model configuration's bound multiplier.
pub fn fit_comparison(raw: &PairData, model: &ModelConfig, sampler: &SamplerConfig) -> Result<ComparisonFit, AnalysisError> {
    let pair = population_scales(raw.clone(), model.bound_multiplier)?;
    let outcome = fit_with_retry(&pair, model, sampler)?;
    let summary = KeyDraws::from_draws(&outcome.draws)?.summarize(model.epsilon)?;
    let d = &outcome.diagnostics;
    let diagnostics = FitDiagnostics {
        max_rhat: d.max_rhat,
        min_ess_bulk: d.min_ess_bulk,
        min_ess_tail: d.min_ess_tail,
        n_divergent: d.n_divergent,
        n_treedepth: d.n_treedepth,
        attempts: outcome.attempts,
        pass: d.pass,
    };
    Ok(ComparisonFit {
        pair,
        draws: outcome.draws,
        summary,
        diagnostics,
    })
}

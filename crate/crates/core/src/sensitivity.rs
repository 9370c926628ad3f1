//! ROPE-width sweeps and prior-variant refits.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{fit_comparison, FitDiagnostics};
use crate::decision::{DecisionError, DecisionSummary, KeyDraws};
use crate::model::{ModelConfig, RhoRule};
use crate::results::PairData;
use crate::sampler::SamplerConfig;
use crate::seed::derive_seed_str;

#[derive(Debug, Error, PartialEq)]
pub enum SensitivityError {
    #[error("no ROPE widths given")]
    NoEpsilons,
    #[error("ROPE width {0} is not a positive number")]
    InvalidEpsilon(f64),
    #[error("invalid variant `{0}`: {1}")]
    InvalidVariant(String, String),
    #[error(transparent)]
    Decision(#[from] DecisionError),
}

/// Decision summaries for each ROPE width, in the order given. The
/// posterior is untouched; only the region frequencies change.
pub fn rope_sweep(draws: &KeyDraws, epsilons: &[f64]) -> Result<Vec<DecisionSummary>, SensitivityError> {
    if epsilons.is_empty() {
        return Err(SensitivityError::NoEpsilons);
    }
    if let Some(&bad) = epsilons.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
        return Err(SensitivityError::InvalidEpsilon(bad));
    }
    Ok(epsilons.iter().map(|&e| draws.summarize(e)).collect::<Result<_, _>>()?)
}

/// A modelling choice to refit under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub rho_rule: RhoRule,
    pub bound_multiplier: f64,
}

impl Variant {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            rho_rule: cfg.rho_rule,
            bound_multiplier: cfg.bound_multiplier,
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            rho_rule: self.rho_rule,
            bound_multiplier: self.bound_multiplier,
            ..*base
        }
    }

    /// Stable text form, also used to derive the variant's seed.
    pub fn descriptor(&self) -> String {
        format!("rho={},mult={}", self.rho_rule.label(), self.bound_multiplier)
    }

    /// Parse `key=value` pairs separated by commas, e.g. `rho=1/(K-1)` or
    /// `rho=1/K,mult=100`. Keys left out keep the value from `base`.
    pub fn parse_with_base(text: &str, base: &ModelConfig) -> Result<Self, SensitivityError> {
        let bad = |msg: String| SensitivityError::InvalidVariant(text.to_string(), msg);
        let mut v = Self::from_model(base);
        // `1/(K-1)` contains no comma, so a plain split is safe
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once('=').ok_or_else(|| bad(format!("`{part}` is not key=value")))?;
            match key.trim() {
                "rho" => v.rho_rule = value.parse().map_err(bad)?,
                "mult" | "bound_multiplier" => {
                    let m: f64 = value.trim().parse().map_err(|_| bad(format!("`{value}` is not a number")))?;
                    if !(m.is_finite() && m > 0.0) {
                        return Err(bad(format!("multiplier {m} must be positive")));
                    }
                    v.bound_multiplier = m;
                }
                other => return Err(bad(format!("unknown key `{other}` (use rho or mult)"))),
            }
        }
        Ok(v)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.descriptor())
    }
}

impl FromStr for Variant {
    type Err = SensitivityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_with_base(s, &ModelConfig::default())
    }
}

/// The single-change alternatives to the default modelling choices.
pub fn default_variants(base: &ModelConfig) -> Vec<Variant> {
    let v = Variant::from_model(base);
    vec![
        Variant {
            rho_rule: RhoRule::InverseKMinusOne,
            ..v
        },
        Variant {
            bound_multiplier: 100.0,
            ..v
        },
    ]
}

/// Largest absolute shifts of the reported quantities between two sets of
/// summaries for the same comparisons.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VariantDeltas {
    /// Shift of `P(base > other)`.
    pub max_dp_win: f64,
    pub max_dp_rope: f64,
    /// Shift of `P(other > base)`.
    pub max_dp_loss: f64,
    pub max_de_delta0: f64,
}

pub fn variant_deltas(reference: &[DecisionSummary], variant: &[DecisionSummary]) -> VariantDeltas {
    let mut d = VariantDeltas::default();
    for (a, b) in reference.iter().zip(variant) {
        d.max_dp_win = d.max_dp_win.max((a.p_base_better - b.p_base_better).abs());
        d.max_dp_rope = d.max_dp_rope.max((a.p_rope - b.p_rope).abs());
        d.max_dp_loss = d.max_dp_loss.max((a.p_other_better - b.p_other_better).abs());
        d.max_de_delta0 = d.max_de_delta0.max((a.e_delta0 - b.e_delta0).abs());
    }
    d
}

/// Result of one comparison under one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantFit {
    pub method: String,
    pub summary: Option<DecisionSummary>,
    pub diagnostics: Option<FitDiagnostics>,
    pub error: Option<String>,
    /// Key parameter draws, kept in memory for ROPE sweeps.
    #[serde(skip)]
    pub key_draws: Option<KeyDraws>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub descriptor: String,
    pub fits: Vec<VariantFit>,
    /// Shifts against the default fits; comparisons where either fit
    /// failed are left out.
    pub deltas: VariantDeltas,
}

/// Seed for one comparison under one variant. Every configuration, the
/// default included, goes through the same derivation.
pub fn variant_seed(seed: u64, method: &str, variant: &Variant) -> u64 {
    derive_seed_str(seed, &format!("{method}|{}", variant.descriptor()))
}

/// Refit every comparison under the default configuration and each variant.
/// The first returned entry is the default. `pairs` may have scales unset.
pub fn variant_sweep(
    pairs: &[PairData],
    base: &ModelConfig,
    sampler: &SamplerConfig,
    variants: &[Variant],
) -> Vec<VariantResult> {
    let mut all = vec![Variant::from_model(base)];
    all.extend_from_slice(variants);

    let jobs: Vec<(usize, usize)> = (0..all.len()).flat_map(|v| (0..pairs.len()).map(move |p| (v, p))).collect();
    let fits: Vec<VariantFit> = jobs
        .par_iter()
        .map(|&(v, p)| {
            let pair = &pairs[p];
            let cfg = SamplerConfig {
                seed: variant_seed(sampler.seed, &pair.method_j, &all[v]),
                ..sampler.clone()
            };
            match fit_comparison(pair, &all[v].apply(base), &cfg) {
                Ok(fit) => VariantFit {
                    method: pair.method_j.clone(),
                    key_draws: KeyDraws::from_draws(&fit.draws).ok(),
                    summary: Some(fit.summary),
                    diagnostics: Some(fit.diagnostics),
                    error: None,
                },
                Err(e) => VariantFit {
                    method: pair.method_j.clone(),
                    summary: None,
                    diagnostics: None,
                    error: Some(e.to_string()),
                    key_draws: None,
                },
            }
        })
        .collect();

    let mut fits = fits.into_iter();
    let mut results: Vec<VariantResult> = all
        .iter()
        .map(|v| VariantResult {
            variant: *v,
            descriptor: v.descriptor(),
            fits: fits.by_ref().take(pairs.len()).collect(),
            deltas: VariantDeltas::default(),
        })
        .collect();

    let reference = results[0].fits.clone();
    for r in &mut results[1..] {
        let (a, b): (Vec<_>, Vec<_>) = reference
            .iter()
            .zip(&r.fits)
            .filter_map(|(a, b)| Some((a.summary.clone()?, b.summary.clone()?)))
            .unzip();
        r.deltas = variant_deltas(&a, &b);
    }
    results
}

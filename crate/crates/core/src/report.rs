//! Report structures and their markdown, CSV and JSON renderings.
//!
//! Probabilities are rendered with 2 decimals and effects with 3 in markdown
//! and CSV; JSON keeps full precision.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::FitDiagnostics;
use crate::decision::DecisionSummary;
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::sensitivity::VariantResult;

pub const TOOL_NAME: &str = "hierbench";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const FAILURE_MARKER: &str = "⚠";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("CSV output: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON output: {0}")]
    Json(#[from] serde_json::Error),
}

/// Serialize NaN as `null` and read `null` back as NaN.
pub mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub n_datasets: usize,
    /// Some scale was zero and floored.
    pub degenerate_scale: bool,
    pub summary: Option<DecisionSummary>,
    pub diagnostics: Option<FitDiagnostics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    DiagnosticsFailed,
    Error,
}

impl RowStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::DiagnosticsFailed => "diagnostics_failed",
            RowStatus::Error => "error",
        }
    }
}

impl ComparisonRow {
    pub fn status(&self) -> RowStatus {
        match (&self.summary, &self.diagnostics) {
            (Some(_), Some(d)) if d.pass => RowStatus::Ok,
            (Some(_), _) => RowStatus::DiagnosticsFailed,
            _ => RowStatus::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub tool: String,
    pub version: String,
    /// SHA-256 of the input results file.
    pub input_sha256: String,
    pub baseline: String,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    /// Datasets do not all have the same number of folds.
    pub mixed_fold_counts: bool,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn all_ok(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.status() == RowStatus::Ok)
    }
}

pub fn fmt_prob(p: f64) -> String {
    fixed(p, 2)
}

pub fn fmt_effect(e: f64) -> String {
    fixed(e, 3)
}

/// Fixed-point rendering without a sign on values that round to zero.
fn fixed(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

/// Scientific notation with a two-digit exponent, e.g. `7.07e-04`.
pub fn fmt_sci(v: f64) -> String {
    if !v.is_finite() {
        return "NA".into();
    }
    let s = format!("{v:.2e}");
    let (mantissa, exp) = s.split_once('e').expect("LowerExp always has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

fn fmt_rhat(v: f64) -> String {
    if v.is_finite() { format!("{v:.3}") } else { "NA".into() }
}

fn fmt_ess(v: f64) -> String {
    if v.is_finite() { format!("{:.0}", v.floor()) } else { "NA".into() }
}

fn fmt_ci(s: &DecisionSummary) -> String {
    format!("[{},{}]", fmt_effect(s.ci_low), fmt_effect(s.ci_high))
}

fn md_escape(s: &str) -> String {
    s.replace('|', "\\|")
}

fn config_line(model: &ModelConfig, sampler: &SamplerConfig) -> String {
    format!(
        "ROPE half-width ε = {}; ρ = {}; prior bound multiplier {}; {} chains × {} draws after {} warmup; seed {}.",
        model.epsilon,
        model.rho_rule.label(),
        model.bound_multiplier,
        sampler.chains,
        sampler.draws,
        sampler.warmup,
        sampler.seed
    )
}

fn summary_cells(s: &DecisionSummary) -> [String; 5] {
    [
        fmt_prob(s.p_base_better),
        fmt_prob(s.p_rope),
        fmt_prob(s.p_other_better),
        fmt_effect(s.e_delta0),
        fmt_ci(s),
    ]
}

pub fn comparison_markdown(report: &ComparisonReport, generated_at: Option<&str>) -> String {
    let mut out = format!("# Comparison against {}\n\n", md_escape(&report.baseline));
    out.push_str(&config_line(&report.model, &report.sampler));
    out.push_str("\n\n");
    if let Some(ts) = generated_at {
        out.push_str(&format!("Generated {ts} by {} {}.\n\n", report.tool, report.version));
    }
    out.push_str("| Method | P(base>other) | P(rope) | P(other>base) | E[δ₀] | 95% CI |\n");
    out.push_str("|---|---:|---:|---:|---:|---|\n");
    let mut any_failed = false;
    let mut notes = Vec::new();
    for row in &report.rows {
        let name = md_escape(&row.method);
        match (row.status(), &row.summary) {
            (RowStatus::Error, _) | (_, None) => {
                let msg = row.error.as_deref().unwrap_or("no result");
                out.push_str(&format!("| {name} | n/a | n/a | n/a | n/a | error: {} |\n", md_escape(msg)));
            }
            (status, Some(s)) => {
                let label = if status == RowStatus::DiagnosticsFailed {
                    any_failed = true;
                    format!("{FAILURE_MARKER} {name}")
                } else {
                    name.clone()
                };
                out.push_str(&format!("| {label} | {} |\n", summary_cells(s).join(" | ")));
            }
        }
        if row.degenerate_scale {
            notes.push(format!("- {name}: a zero scale was replaced by a small floor value."));
        }
    }
    if any_failed {
        out.push_str(&format!(
            "\n{FAILURE_MARKER} Convergence diagnostics did not pass after all retries; these values are not reliable.\n"
        ));
    }
    if report.mixed_fold_counts {
        notes.push("- Datasets differ in their number of folds; the fold correlation is set per dataset.".into());
    }
    if !notes.is_empty() {
        out.push_str("\nNotes:\n\n");
        out.push_str(&notes.join("\n"));
        out.push('\n');
    }
    out
}

fn csv_string<F>(header: &[&str], fill: F) -> Result<String, ReportError>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<(), csv::Error>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    fill(&mut w)?;
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("CSV writer emits UTF-8"))
}

pub const COMPARISON_CSV_HEADER: [&str; 8] = [
    "method",
    "p_base_better",
    "p_rope",
    "p_other_better",
    "e_delta0",
    "ci_low",
    "ci_high",
    "status",
];

pub fn comparison_csv(report: &ComparisonReport) -> Result<String, ReportError> {
    csv_string(&COMPARISON_CSV_HEADER, |w| {
        for row in &report.rows {
            let status = row.status().as_str();
            match &row.summary {
                Some(s) => w.write_record([
                    row.method.as_str(),
                    &fmt_prob(s.p_base_better),
                    &fmt_prob(s.p_rope),
                    &fmt_prob(s.p_other_better),
                    &fmt_effect(s.e_delta0),
                    &fmt_effect(s.ci_low),
                    &fmt_effect(s.ci_high),
                    status,
                ])?,
                None => w.write_record([row.method.as_str(), "", "", "", "", "", "", status])?,
            }
        }
        Ok(())
    })
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String, ReportError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Aggregate over the rows that produced a fit.
fn aggregate(rows: &[&FitDiagnostics]) -> Option<FitDiagnostics> {
    let first = rows.first()?;
    let mut agg = (*first).clone();
    for d in &rows[1..] {
        agg.max_rhat = nan_max(agg.max_rhat, d.max_rhat);
        agg.min_ess_bulk = nan_min(agg.min_ess_bulk, d.min_ess_bulk);
        agg.min_ess_tail = nan_min(agg.min_ess_tail, d.min_ess_tail);
        agg.n_divergent += d.n_divergent;
        agg.n_treedepth += d.n_treedepth;
        agg.attempts = agg.attempts.max(d.attempts);
        agg.pass &= d.pass;
    }
    Some(agg)
}

// NaN wins so that a failed statistic is never hidden by an aggregate.
fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) }
}

fn nan_min(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() { f64::NAN } else { a.min(b) }
}

pub fn diagnostics_markdown(report: &ComparisonReport) -> String {
    let mut out = format!("# Sampler diagnostics for comparisons against {}\n\n", md_escape(&report.baseline));
    out.push_str("| Method | max R̂ | min ESS (bulk/tail) | divergent/treedepth | max P(\\|δ_new\\|>1) | attempts | pass |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---|\n");
    let mut fitted = Vec::new();
    let mut worst_bound = f64::NEG_INFINITY;
    for row in &report.rows {
        let name = md_escape(&row.method);
        let Some(d) = &row.diagnostics else {
            out.push_str(&format!("| {name} | n/a | n/a | n/a | n/a | n/a | error |\n"));
            continue;
        };
        let bound = row.summary.as_ref().map_or(f64::NAN, |s| s.p_bound_violation);
        worst_bound = nan_max(worst_bound, bound);
        out.push_str(&diag_md_row(&name, d, bound));
        fitted.push(d);
    }
    if fitted.len() > 1 {
        let agg = aggregate(&fitted).expect("non-empty");
        out.push_str(&diag_md_row("all", &agg, worst_bound));
    }
    out
}

fn diag_md_row(name: &str, d: &FitDiagnostics, bound: f64) -> String {
    format!(
        "| {name} | {} | {}/{} | {}/{} | {} | {} | {} |\n",
        fmt_rhat(d.max_rhat),
        fmt_ess(d.min_ess_bulk),
        fmt_ess(d.min_ess_tail),
        d.n_divergent,
        d.n_treedepth,
        fmt_sci(bound),
        d.attempts,
        if d.pass { "yes" } else { "no" }
    )
}

pub const DIAGNOSTICS_CSV_HEADER: [&str; 9] = [
    "method",
    "max_rhat",
    "min_ess_bulk",
    "min_ess_tail",
    "n_divergent",
    "n_treedepth",
    "p_bound_violation",
    "attempts",
    "pass",
];

pub fn diagnostics_csv(report: &ComparisonReport) -> Result<String, ReportError> {
    csv_string(&DIAGNOSTICS_CSV_HEADER, |w| {
        for row in &report.rows {
            match &row.diagnostics {
                Some(d) => {
                    let bound = row.summary.as_ref().map_or(f64::NAN, |s| s.p_bound_violation);
                    w.write_record([
                        row.method.clone(),
                        fmt_rhat(d.max_rhat),
                        fmt_ess(d.min_ess_bulk),
                        fmt_ess(d.min_ess_tail),
                        d.n_divergent.to_string(),
                        d.n_treedepth.to_string(),
                        fmt_sci(bound),
                        d.attempts.to_string(),
                        d.pass.to_string(),
                    ])?
                }
                None => w.write_record([row.method.as_str(), "", "", "", "", "", "", "", "false"])?,
            }
        }
        Ok(())
    })
}

/// ROPE sweep results for one comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeRows {
    pub method: String,
    pub summaries: Vec<DecisionSummary>,
    pub diagnostics: Option<FitDiagnostics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub tool: String,
    pub version: String,
    pub input_sha256: String,
    pub baseline: String,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub epsilons: Vec<f64>,
    pub rope: Vec<RopeRows>,
    /// The default configuration first, then each variant.
    pub variants: Vec<VariantResult>,
}

impl SensitivityReport {
    pub fn all_ok(&self) -> bool {
        let rope_ok = self
            .rope
            .iter()
            .all(|r| r.error.is_none() && r.diagnostics.as_ref().is_some_and(|d| d.pass));
        let variants_ok = self
            .variants
            .iter()
            .flat_map(|v| &v.fits)
            .all(|f| f.error.is_none() && f.diagnostics.as_ref().is_some_and(|d| d.pass));
        !self.rope.is_empty() && rope_ok && variants_ok
    }
}

pub fn sensitivity_markdown(report: &SensitivityReport, generated_at: Option<&str>) -> String {
    let mut out = format!("# Sensitivity of comparisons against {}\n\n", md_escape(&report.baseline));
    out.push_str(&config_line(&report.model, &report.sampler));
    out.push_str("\n\n");
    if let Some(ts) = generated_at {
        out.push_str(&format!("Generated {ts} by {} {}.\n\n", report.tool, report.version));
    }
    out.push_str("## ROPE half-width\n\n");
    out.push_str("| Method | ε | P(base>other) | P(rope) | P(other>base) | E[δ₀] | 95% CI |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---|\n");
    let mut any_failed = false;
    for r in &report.rope {
        let mut name = md_escape(&r.method);
        if let Some(e) = &r.error {
            out.push_str(&format!("| {name} | n/a | n/a | n/a | n/a | n/a | error: {} |\n", md_escape(e)));
            continue;
        }
        if !r.diagnostics.as_ref().is_some_and(|d| d.pass) {
            any_failed = true;
            name = format!("{FAILURE_MARKER} {name}");
        }
        for s in &r.summaries {
            out.push_str(&format!("| {name} | {} | {} |\n", s.epsilon, summary_cells(s).join(" | ")));
        }
    }

    out.push_str("\n## Modelling variants\n\n");
    out.push_str("Largest absolute change against the default fit over all comparisons.\n\n");
    out.push_str("| Variant | max \\|ΔP(base>other)\\| | max \\|ΔP(rope)\\| | max \\|ΔP(other>base)\\| | max \\|ΔE[δ₀]\\| | fits passing diagnostics |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|\n");
    for (i, v) in report.variants.iter().enumerate() {
        let passed = v.fits.iter().filter(|f| f.diagnostics.as_ref().is_some_and(|d| d.pass)).count();
        if passed < v.fits.len() {
            any_failed = true;
        }
        let label = if i == 0 { format!("{} (default)", v.descriptor) } else { v.descriptor.clone() };
        let d = &v.deltas;
        let marker = if passed < v.fits.len() { format!("{FAILURE_MARKER} ") } else { String::new() };
        out.push_str(&format!(
            "| {marker}{} | {} | {} | {} | {} | {passed}/{} |\n",
            md_escape(&label),
            fmt_prob(d.max_dp_win),
            fmt_prob(d.max_dp_rope),
            fmt_prob(d.max_dp_loss),
            fmt_effect(d.max_de_delta0),
            v.fits.len()
        ));
    }
    if any_failed {
        out.push_str(&format!(
            "\n{FAILURE_MARKER} Some fits did not pass convergence diagnostics after all retries; their values are not reliable.\n"
        ));
    }
    out
}

pub const SENSITIVITY_CSV_HEADER: [&str; 13] = [
    "section",
    "name",
    "epsilon",
    "p_base_better",
    "p_rope",
    "p_other_better",
    "e_delta0",
    "ci_low",
    "ci_high",
    "max_dp_win",
    "max_dp_rope",
    "max_dp_loss",
    "max_de_delta0",
];

pub fn sensitivity_csv(report: &SensitivityReport) -> Result<String, ReportError> {
    csv_string(&SENSITIVITY_CSV_HEADER, |w| {
        for r in &report.rope {
            for s in &r.summaries {
                w.write_record([
                    "rope".to_string(),
                    r.method.clone(),
                    s.epsilon.to_string(),
                    fmt_prob(s.p_base_better),
                    fmt_prob(s.p_rope),
                    fmt_prob(s.p_other_better),
                    fmt_effect(s.e_delta0),
                    fmt_effect(s.ci_low),
                    fmt_effect(s.ci_high),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ])?;
            }
        }
        for v in &report.variants {
            let d = &v.deltas;
            let mut rec = vec!["variant".to_string(), v.descriptor.clone()];
            rec.extend(std::iter::repeat_n(String::new(), 7));
            rec.extend([
                fmt_prob(d.max_dp_win),
                fmt_prob(d.max_dp_rope),
                fmt_prob(d.max_dp_loss),
                fmt_effect(d.max_de_delta0),
            ]);
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

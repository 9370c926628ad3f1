//! Configuration resolution and the work behind each CLI subcommand.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{fit_comparison, FitDiagnostics};
use crate::masks::{generate_masks, MaskError, MaskFormat, MaskSpec};
use crate::model::{ModelConfig, RhoRule};
use crate::report::{
    comparison_csv, comparison_markdown, diagnostics_csv, diagnostics_markdown, sensitivity_csv,
    sensitivity_markdown, to_json, ComparisonReport, ComparisonRow, ReportError, RopeRows, SensitivityReport,
    TOOL_NAME, TOOL_VERSION,
};
use crate::results::{pairwise_differences, parse_results, InputFormat, PairData, ResultTable, ResultsError};
use crate::sampler::SamplerConfig;
use crate::seed::derive_seed_str;
use crate::sensitivity::{default_variants, rope_sweep, variant_sweep, SensitivityError, Variant};

pub const SEED_ENV: &str = "HIERBENCH_SEED";
pub const DEFAULT_EPSILONS: [f64; 3] = [0.005, 0.01, 0.02];

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Results(#[from] ResultsError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Masks(#[from] MaskError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error("thread pool: {0}")]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |source| CommandError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Settings as they appear in a config file or on the command line. Every
/// field is optional; see [`RunConfig::resolve`] for precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub results: Option<PathBuf>,
    pub baseline: Option<String>,
    pub methods: Option<Vec<String>>,
    pub epsilon: Option<f64>,
    pub epsilons: Option<Vec<f64>>,
    pub rho_rule: Option<String>,
    pub bound_multiplier: Option<f64>,
    pub variants: Option<Vec<String>>,
    pub chains: Option<usize>,
    pub warmup: Option<usize>,
    pub draws: Option<usize>,
    pub target_accept: Option<f64>,
    pub max_treedepth: Option<usize>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub emit_raw_draws: Option<bool>,
    pub jobs: Option<usize>,
    pub no_timestamp: Option<bool>,
    pub allow_self: Option<bool>,
}

impl Settings {
    pub fn from_json_file(path: &Path) -> Result<Self, CommandError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CommandError::Config(format!("{}: {e}", path.display())))
    }

    /// Field-wise overlay: values set in `over` win.
    pub fn overlay(self, over: Settings) -> Settings {
        Settings {
            results: over.results.or(self.results),
            baseline: over.baseline.or(self.baseline),
            methods: over.methods.or(self.methods),
            epsilon: over.epsilon.or(self.epsilon),
            epsilons: over.epsilons.or(self.epsilons),
            rho_rule: over.rho_rule.or(self.rho_rule),
            bound_multiplier: over.bound_multiplier.or(self.bound_multiplier),
            variants: over.variants.or(self.variants),
            chains: over.chains.or(self.chains),
            warmup: over.warmup.or(self.warmup),
            draws: over.draws.or(self.draws),
            target_accept: over.target_accept.or(self.target_accept),
            max_treedepth: over.max_treedepth.or(self.max_treedepth),
            seed: over.seed.or(self.seed),
            output_dir: over.output_dir.or(self.output_dir),
            emit_raw_draws: over.emit_raw_draws.or(self.emit_raw_draws),
            jobs: over.jobs.or(self.jobs),
            no_timestamp: over.no_timestamp.or(self.no_timestamp),
            allow_self: over.allow_self.or(self.allow_self),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub results: PathBuf,
    pub baseline: String,
    /// `None` compares the baseline against every other method.
    pub methods: Option<Vec<String>>,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub epsilons: Vec<f64>,
    pub variants: Vec<Variant>,
    pub output_dir: PathBuf,
    pub emit_raw_draws: bool,
    pub jobs: Option<usize>,
    pub no_timestamp: bool,
    /// Permit the baseline in the method list (an all-zero comparison).
    pub allow_self: bool,
}

impl RunConfig {
    /// Precedence: command-line flags, then the config file, then the seed
    /// environment variable, then built-in defaults.
    pub fn resolve(file: Option<Settings>, flags: Settings, env_seed: Option<&str>) -> Result<Self, CommandError> {
        let s = file.unwrap_or_default().overlay(flags);
        let bad = |m: String| CommandError::Config(m);

        let env_seed = match env_seed {
            Some(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| bad(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?,
            ),
            None => None,
        };
        let mut model = ModelConfig::default();
        if let Some(e) = s.epsilon {
            if !(e.is_finite() && e > 0.0) {
                return Err(bad(format!("epsilon must be positive, got {e}")));
            }
            model.epsilon = e;
        }
        if let Some(r) = &s.rho_rule {
            model.rho_rule = r.parse::<RhoRule>().map_err(bad)?;
        }
        if let Some(m) = s.bound_multiplier {
            if !(m.is_finite() && m > 0.0) {
                return Err(bad(format!("bound multiplier must be positive, got {m}")));
            }
            model.bound_multiplier = m;
        }

        let defaults = SamplerConfig::default();
        let sampler = SamplerConfig {
            chains: s.chains.unwrap_or(defaults.chains),
            warmup: s.warmup.unwrap_or(defaults.warmup),
            draws: s.draws.unwrap_or(defaults.draws),
            target_accept: s.target_accept.unwrap_or(defaults.target_accept),
            max_treedepth: s.max_treedepth.unwrap_or(defaults.max_treedepth),
            seed: s.seed.or(env_seed).unwrap_or(defaults.seed),
        };
        if sampler.chains < 2 {
            return Err(bad("at least 2 chains are needed for diagnostics".into()));
        }
        if !(sampler.target_accept > 0.0 && sampler.target_accept < 1.0) {
            return Err(bad(format!("target_accept must lie in (0, 1), got {}", sampler.target_accept)));
        }

        let variants = match &s.variants {
            Some(list) => list
                .iter()
                .map(|v| Variant::parse_with_base(v, &model))
                .collect::<Result<Vec<_>, _>>()?,
            None => default_variants(&model),
        };
        if s.jobs == Some(0) {
            return Err(bad("jobs must be at least 1".into()));
        }

        Ok(Self {
            results: s.results.ok_or_else(|| bad("no results file given".into()))?,
            baseline: s.baseline.ok_or_else(|| bad("no baseline method given".into()))?,
            methods: s.methods,
            model,
            sampler,
            epsilons: s.epsilons.unwrap_or_else(|| DEFAULT_EPSILONS.to_vec()),
            variants,
            output_dir: s.output_dir.unwrap_or_else(|| PathBuf::from(".")),
            emit_raw_draws: s.emit_raw_draws.unwrap_or(false),
            jobs: s.jobs,
            no_timestamp: s.no_timestamp.unwrap_or(false),
            allow_self: s.allow_self.unwrap_or(false),
        })
    }
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CommandError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(contents).map_err(io_err(path))?;
    tmp.flush().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| CommandError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Replace characters that are awkward in file names.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

fn timestamp(cfg: &RunConfig) -> Option<String> {
    (!cfg.no_timestamp).then(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
}

/// The parsed results file and its hash.
pub struct LoadedResults {
    pub table: ResultTable,
    pub sha256: String,
}

pub fn load_results(path: &Path) -> Result<LoadedResults, CommandError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let table = parse_results(bytes.as_slice(), InputFormat::from_path(path))?;
    Ok(LoadedResults {
        table,
        sha256: sha256_hex(&bytes),
    })
}

fn comparison_methods(cfg: &RunConfig, table: &ResultTable) -> Result<Vec<String>, CommandError> {
    if !table.has_method(&cfg.baseline) {
        return Err(ResultsError::UnknownMethod(cfg.baseline.clone()).into());
    }
    let methods = match &cfg.methods {
        Some(list) => {
            for m in list {
                if !table.has_method(m) {
                    return Err(ResultsError::UnknownMethod(m.clone()).into());
                }
                if *m == cfg.baseline && !cfg.allow_self {
                    return Err(CommandError::Config(format!(
                        "method list contains the baseline `{m}`; pass --allow-self to compare it with itself"
                    )));
                }
            }
            list.clone()
        }
        None => table.methods().iter().filter(|m| **m != cfg.baseline).cloned().collect(),
    };
    Ok(methods)
}

fn mixed_fold_counts(table: &ResultTable) -> bool {
    table.folds_per_dataset().values().collect::<BTreeSet<_>>().len() > 1
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, CommandError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        b = b.num_threads(j);
    }
    Ok(b.build()?)
}

/// Seed for the fit of one comparison in `compare`.
pub fn comparison_seed(seed: u64, method: &str) -> u64 {
    derive_seed_str(seed, method)
}

pub struct CompareOutput {
    pub report: ComparisonReport,
    pub written: Vec<PathBuf>,
}

/// Fit every comparison against the baseline and write the reports.
pub fn run_compare(cfg: &RunConfig) -> Result<CompareOutput, CommandError> {
    let loaded = load_results(&cfg.results)?;
    let methods = comparison_methods(cfg, &loaded.table)?;

    let fits: Vec<(ComparisonRow, Option<String>)> = pool(cfg.jobs)?.install(|| {
        methods
            .par_iter()
            .map(|m| compare_one(&loaded.table, cfg, m))
            .collect()
    });

    let report = ComparisonReport {
        tool: TOOL_NAME.into(),
        version: TOOL_VERSION.into(),
        input_sha256: loaded.sha256,
        baseline: cfg.baseline.clone(),
        model: cfg.model,
        sampler: cfg.sampler.clone(),
        mixed_fold_counts: mixed_fold_counts(&loaded.table),
        rows: fits.iter().map(|(r, _)| r.clone()).collect(),
    };

    let dir = &cfg.output_dir;
    let ts = timestamp(cfg);
    let mut written = Vec::new();
    let mut emit = |name: String, text: &str| -> Result<(), CommandError> {
        let path = dir.join(name);
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
        Ok(())
    };
    emit("compare.md".into(), &comparison_markdown(&report, ts.as_deref()))?;
    emit("compare.csv".into(), &comparison_csv(&report)?)?;
    emit("compare.json".into(), &to_json(&report)?)?;
    emit("diagnostics.md".into(), &diagnostics_markdown(&report))?;
    emit("diagnostics.csv".into(), &diagnostics_csv(&report)?)?;
    for ((row, draws_csv), m) in fits.iter().zip(&methods) {
        if let Some(text) = draws_csv {
            debug_assert_eq!(&row.method, m);
            emit(format!("draws_{}.csv", file_stem(m)), text)?;
        }
    }
    Ok(CompareOutput { report, written })
}

fn compare_one(table: &ResultTable, cfg: &RunConfig, method: &str) -> (ComparisonRow, Option<String>) {
    let failed = |n_datasets: usize, e: String| ComparisonRow {
        method: method.to_string(),
        n_datasets,
        degenerate_scale: false,
        summary: None,
        diagnostics: None,
        error: Some(e),
    };
    let pair = match pairwise_differences(table, &cfg.baseline, method) {
        Ok(p) => p,
        Err(e) => return (failed(0, e.to_string()), None),
    };
    let sampler = SamplerConfig {
        seed: comparison_seed(cfg.sampler.seed, method),
        ..cfg.sampler.clone()
    };
    match fit_comparison(&pair, &cfg.model, &sampler) {
        Ok(fit) => {
            let draws = cfg.emit_raw_draws.then(|| fit.draws.to_csv());
            let row = ComparisonRow {
                method: method.to_string(),
                n_datasets: fit.pair.n_datasets(),
                degenerate_scale: fit.pair.degenerate_scale,
                summary: Some(fit.summary),
                diagnostics: Some(fit.diagnostics),
                error: None,
            };
            (row, draws)
        }
        Err(e) => (failed(pair.n_datasets(), e.to_string()), None),
    }
}

pub struct SensitivityOutput {
    pub report: SensitivityReport,
    pub written: Vec<PathBuf>,
}

/// ROPE sweep on the default fit of each comparison, plus refits under
/// each variant.
pub fn run_sensitivity(cfg: &RunConfig) -> Result<SensitivityOutput, CommandError> {
    if cfg.epsilons.is_empty() {
        return Err(SensitivityError::NoEpsilons.into());
    }
    if let Some(&bad) = cfg.epsilons.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
        return Err(SensitivityError::InvalidEpsilon(bad).into());
    }
    let loaded = load_results(&cfg.results)?;
    let methods = comparison_methods(cfg, &loaded.table)?;

    let mut pairs: Vec<PairData> = Vec::new();
    let mut pair_errors: Vec<(String, String)> = Vec::new();
    for m in &methods {
        match pairwise_differences(&loaded.table, &cfg.baseline, m) {
            Ok(p) => pairs.push(p),
            Err(e) => pair_errors.push((m.clone(), e.to_string())),
        }
    }

    let variants = pool(cfg.jobs)?.install(|| variant_sweep(&pairs, &cfg.model, &cfg.sampler, &cfg.variants));

    let mut rope = Vec::new();
    for m in &methods {
        if let Some((_, e)) = pair_errors.iter().find(|(n, _)| n == m) {
            rope.push(rope_error(m, None, e.clone()));
            continue;
        }
        let fit = variants[0].fits.iter().find(|f| &f.method == m).expect("one fit per pair");
        let row = match (&fit.key_draws, &fit.error) {
            (Some(keys), _) => match rope_sweep(keys, &cfg.epsilons) {
                Ok(summaries) => RopeRows {
                    method: m.clone(),
                    summaries,
                    diagnostics: fit.diagnostics.clone(),
                    error: None,
                },
                Err(e) => rope_error(m, fit.diagnostics.clone(), e.to_string()),
            },
            (None, e) => rope_error(m, fit.diagnostics.clone(), e.clone().unwrap_or_else(|| "no draws".into())),
        };
        rope.push(row);
    }

    let report = SensitivityReport {
        tool: TOOL_NAME.into(),
        version: TOOL_VERSION.into(),
        input_sha256: loaded.sha256,
        baseline: cfg.baseline.clone(),
        model: cfg.model,
        sampler: cfg.sampler.clone(),
        epsilons: cfg.epsilons.clone(),
        rope,
        variants,
    };
    let dir = &cfg.output_dir;
    let ts = timestamp(cfg);
    let mut written = Vec::new();
    for (name, text) in [
        ("sensitivity.md", sensitivity_markdown(&report, ts.as_deref())),
        ("sensitivity.csv", sensitivity_csv(&report)?),
        ("sensitivity.json", to_json(&report)?),
    ] {
        let path = dir.join(name);
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
    }
    Ok(SensitivityOutput { report, written })
}

fn rope_error(method: &str, diagnostics: Option<FitDiagnostics>, error: String) -> RopeRows {
    RopeRows {
        method: method.to_string(),
        summaries: Vec::new(),
        diagnostics,
        error: Some(error),
    }
}

/// Rebuild the diagnostics tables from a saved `compare.json`.
pub fn run_diagnostics(report_path: &Path, output_dir: &Path) -> Result<(ComparisonReport, Vec<PathBuf>), CommandError> {
    let text = std::fs::read_to_string(report_path).map_err(io_err(report_path))?;
    let report: ComparisonReport = serde_json::from_str(&text)
        .map_err(|e| CommandError::Config(format!("{}: not a comparison report: {e}", report_path.display())))?;
    let mut written = Vec::new();
    for (name, body) in [
        ("diagnostics.md", diagnostics_markdown(&report)),
        ("diagnostics.csv", diagnostics_csv(&report)?),
    ] {
        let path = output_dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        written.push(path);
    }
    Ok((report, written))
}

/// Generate one split's masks and write them in the requested formats.
pub fn run_masks(spec: &MaskSpec, formats: &[MaskFormat], output_dir: &Path) -> Result<Vec<PathBuf>, CommandError> {
    let set = generate_masks(spec)?;
    let stem = format!("masks_{}", file_stem(&spec.split_id));
    let mut written = Vec::new();
    for &f in formats {
        let ext = match f {
            MaskFormat::Csv => "csv",
            MaskFormat::Json => "json",
        };
        let path = output_dir.join(format!("{stem}.{ext}"));
        write_atomic(&path, set.serialize(f)?.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hierbench::commands::{run_compare, run_diagnostics, run_masks, run_sensitivity, RunConfig, Settings, SEED_ENV};
use hierbench::masks::{MaskFormat, MaskSpec};

/// Bayesian hierarchical comparison of cross-validated benchmark results.
#[derive(Parser)]
#[command(name = "hierbench", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare a baseline against other methods.
    Compare(FitArgs),
    /// ROPE-width sweep and refits under alternative modelling choices.
    Sensitivity {
        #[command(flatten)]
        fit: FitArgs,
        /// ROPE half-widths to sweep.
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
        /// Variant to refit under, e.g. `rho=1/(K-1)` or `rho=1/K,mult=100`.
        /// Repeat for several.
        #[arg(long = "variant")]
        variants: Option<Vec<String>>,
    },
    /// Generate structured modality-missingness masks.
    Masks(MaskArgs),
    /// Rebuild the diagnostics tables from a saved compare.json.
    Diagnostics {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
    },
}

#[derive(Args)]
struct FitArgs {
    /// JSON file with default settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fold-level results (CSV or JSON).
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long)]
    baseline: Option<String>,
    /// Methods to compare against the baseline (default: all others).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// ROPE half-width.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Fold correlation rule: 1/K, 1/(K-1) or a fixed number.
    #[arg(long)]
    rho_rule: Option<String>,
    /// Multiplier on the observed scales for the uniform prior bounds.
    #[arg(long)]
    bound_multiplier: Option<f64>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    target_accept: Option<f64>,
    #[arg(long)]
    max_treedepth: Option<usize>,
    /// Base seed (also read from HIERBENCH_SEED).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Also write the posterior draws of each comparison.
    #[arg(long)]
    emit_raw_draws: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Leave the generation time out of the markdown reports.
    #[arg(long)]
    no_timestamp: bool,
    /// Allow the baseline itself in --methods.
    #[arg(long)]
    allow_self: bool,
}

impl FitArgs {
    fn resolve(self, epsilons: Option<Vec<f64>>, variants: Option<Vec<String>>) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => Some(Settings::from_json_file(p)?),
            None => None,
        };
        let flags = Settings {
            results: self.results,
            baseline: self.baseline,
            methods: self.methods,
            epsilon: self.epsilon,
            epsilons,
            rho_rule: self.rho_rule,
            bound_multiplier: self.bound_multiplier,
            variants,
            chains: self.chains,
            warmup: self.warmup,
            draws: self.draws,
            target_accept: self.target_accept,
            max_treedepth: self.max_treedepth,
            seed: self.seed,
            output_dir: self.output_dir,
            emit_raw_draws: self.emit_raw_draws.then_some(true),
            jobs: self.jobs,
            no_timestamp: self.no_timestamp.then_some(true),
            allow_self: self.allow_self.then_some(true),
        };
        let env_seed = std::env::var(SEED_ENV).ok();
        Ok(RunConfig::resolve(file, flags, env_seed.as_deref())?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Both,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long, visible_alias = "n")]
    n_samples: usize,
    #[arg(long, visible_alias = "modalities")]
    n_modalities: usize,
    /// Fraction of samples in each missing-count group.
    #[arg(long)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, visible_alias = "split", default_value = "test")]
    split_id: String,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Compare(args) => {
            let cfg = args.resolve(None, None)?;
            let out = run_compare(&cfg).context("compare failed")?;
            print_written(&out.written);
            Ok(partial_if(!out.report.all_ok()))
        }
        Command::Sensitivity { fit, epsilons, variants } => {
            let cfg = fit.resolve(epsilons, variants)?;
            let out = run_sensitivity(&cfg).context("sensitivity failed")?;
            print_written(&out.written);
            Ok(partial_if(!out.report.all_ok()))
        }
        Command::Masks(a) => {
            let spec = MaskSpec {
                n_samples: a.n_samples,
                n_modalities: a.n_modalities,
                rate: a.rate,
                seed: a.seed,
                split_id: a.split_id,
            };
            let formats: &[MaskFormat] = match a.format {
                FormatArg::Csv => &[MaskFormat::Csv],
                FormatArg::Json => &[MaskFormat::Json],
                FormatArg::Both => &[MaskFormat::Csv, MaskFormat::Json],
            };
            print_written(&run_masks(&spec, formats, &a.output_dir)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Diagnostics { report, output_dir } => {
            let (rep, written) = run_diagnostics(&report, &output_dir)?;
            print_written(&written);
            Ok(partial_if(!rep.all_ok()))
        }
    }
}

fn partial_if(partial: bool) -> ExitCode {
    if partial {
        eprintln!("warning: some comparisons failed or did not pass convergence diagnostics");
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

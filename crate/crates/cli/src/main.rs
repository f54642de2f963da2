//! `lago` batch driver: synthetic scenes, inference runs, budget sweeps,
//! oracle checks and calibration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "lago", version, about = "Localized visual-text alignment over patch-embedding bundles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Dominant target over smaller distractors (classification benchmark).
    Benchmark,
    /// Sparse scenes for the search-versus-oracle comparison.
    Search,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded scene suite file.
    Suite {
        #[arg(long, value_enum, default_value = "benchmark")]
        preset: Preset,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one bundle (plus manifest) per scene of a suite file.
    Synth {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify every bundle in a directory.
    Run {
        #[arg(long)]
        bundles: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-image ranked crops as JSON.
        #[arg(long)]
        crops: Option<PathBuf>,
        /// Directory for calibration score caches (needs labelled bundles).
        #[arg(long)]
        cache_out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Extra `key=value` config overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Accuracy of lago and the random-crop ablation per view budget.
    Sweep {
        #[arg(long)]
        bundles: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        budgets: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compare greedy search with the exhaustive lattice optimum on one bundle.
    Oracle {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 8)]
        quantize: usize,
        #[arg(long, default_value_t = 0.0)]
        gamma: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid search over (beta, alpha_dc, lambda) on cached scores.
    Calibrate {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        grid_beta: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        grid_alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        grid_lambda: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print every config key with its default value.
    Defaults,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Suite { preset, count, seed, out } => {
            let preset = match preset {
                Preset::Benchmark => commands::SuitePreset::Benchmark,
                Preset::Search => commands::SuitePreset::Search,
            };
            commands::suite(preset, count, seed, &out)
        }
        Command::Synth { suite, out } => commands::synth(&suite, &out),
        Command::Run { bundles, config, out, crops, cache_out, seed, lambda, overrides } => {
            commands::load_config(config.as_deref(), seed, lambda, &overrides).and_then(|cfg| {
                commands::run(&bundles, &cfg, &out, crops.as_deref(), cache_out.as_deref())
            })
        }
        Command::Sweep { bundles, budgets, config, out, seed, overrides } => {
            commands::load_config(config.as_deref(), seed, None, &overrides)
                .and_then(|cfg| commands::sweep(&bundles, &budgets, &cfg, &out))
        }
        Command::Oracle { bundle, quantize, gamma, config, out } => {
            commands::load_config(config.as_deref(), None, None, &[])
                .and_then(|cfg| commands::oracle(&bundle, quantize, gamma, &cfg, &out))
        }
        Command::Calibrate { cache, grid_beta, grid_alpha, grid_lambda, out } => {
            commands::calibrate(&cache, grid_beta, grid_alpha, grid_lambda, &out)
        }
        Command::Defaults => {
            print!("{}", config::RunConfig::default().render());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

//! `crowdslam` command line: data generation, training, SLAM runs,
//! evaluation and plotting.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{PriorChoice, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 2.
    #[error("{0}")]
    Validation(String),
    /// Anything that fails after validation; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "crowdslam", version, about = "Dynamic GraphSLAM with learned pedestrian motion priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads for per-episode work (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the train and test episodes and write the manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Master seed; overrides `seeds.master`.
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory; overrides `paths.data_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the MLP or GAT velocity predictor on the train split.
    Train {
        #[command(flatten)]
        common: Common,
        /// `mlp`, or any GAT prior (`gat-det`, `gat-stoch`).
        #[arg(long)]
        prior: PriorChoice,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory; overrides `paths.data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Weights file; the loss curve goes next to it as `<stem>.loss.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run sliding-window SLAM over every test episode.
    Run {
        #[command(flatten)]
        common: Common,
        /// Overrides `prior.kind`.
        #[arg(long)]
        prior: Option<PriorChoice>,
        /// Network weights; default `<paths.weights_dir>/{mlp,gat}.json`.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Rollout seed of the stochastic prior; overrides `seeds.rollout`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Results root; files go to `<out>/<prior>/`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every method found under the results root.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        results: Option<PathBuf>,
        /// Report directory for `table.csv` and `episodes.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw one result over its ground truth as SVG.
    Plot {
        #[command(flatten)]
        common: Common,
        /// SLAM result file written by `run`.
        #[arg(long)]
        result: PathBuf,
        /// Episode index in the manifest; default is the result's seed.
        #[arg(long)]
        episode: Option<usize>,
        /// Step whose forecasts are drawn; default is the step with the most.
        #[arg(long)]
        step: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the full default configuration as TOML.
    PrintDefaultConfig,
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if common.jobs == Some(0) {
        return Err(CliError::Validation("--jobs: must be positive".into()));
    }
    Ok(config)
}

fn pool(common: &Common) -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.jobs {
        b = b.num_threads(n);
    }
    b.build().map_err(CliError::runtime)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::PrintDefaultConfig => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
        Command::GenData { common, seed, out } => {
            let mut config = load_config(&common)?;
            if let Some(s) = seed {
                config.seeds.master = s;
            }
            let out = out.unwrap_or_else(|| config.paths.data_dir.clone());
            pool(&common)?.install(|| commands::gen_data(&config, &out))
        }
        Command::Train {
            common,
            prior,
            seed,
            data,
            out,
        } => {
            let mut config = load_config(&common)?;
            if let Some(s) = seed {
                config.seeds.train = s;
            }
            let data = data.unwrap_or_else(|| config.paths.data_dir.clone());
            commands::train(&config, prior, &data, out)
        }
        Command::Run {
            common,
            prior,
            weights,
            seed,
            data,
            out,
        } => {
            let mut config = load_config(&common)?;
            if let Some(p) = prior {
                config.prior.kind = p;
            }
            if let Some(s) = seed {
                config.seeds.rollout = s;
            }
            config.validate()?;
            let data = data.unwrap_or_else(|| config.paths.data_dir.clone());
            let out = out.unwrap_or_else(|| config.paths.results_dir.clone());
            pool(&common)?.install(|| commands::run(&config, &data, weights, &out))
        }
        Command::Eval {
            common,
            data,
            results,
            out,
        } => {
            let config = load_config(&common)?;
            let data = data.unwrap_or_else(|| config.paths.data_dir.clone());
            let results = results.unwrap_or_else(|| config.paths.results_dir.clone());
            let out = out.unwrap_or_else(|| config.paths.report_dir.clone());
            pool(&common)?.install(|| commands::eval(&config, &data, &results, &out))
        }
        Command::Plot {
            common,
            result,
            episode,
            step,
            data,
            out,
        } => {
            let config = load_config(&common)?;
            let data = data.unwrap_or_else(|| config.paths.data_dir.clone());
            commands::plot(&result, &data, episode, step, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

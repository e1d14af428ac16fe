use std::fmt;
use std::path::{Path, PathBuf};

use crowdslam::metrics::MetricOptions;
use crowdslam::neuralnet::TrainConfig;
use crowdslam::priors::StochasticParams;
use crowdslam::simulator::SimConfig;
use crowdslam::slam::SlamConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PriorChoice {
    None,
    Cvm,
    Mlp,
    GatDet,
    GatStoch,
}

impl PriorChoice {
    pub const ALL: [PriorChoice; 5] = [
        PriorChoice::None,
        PriorChoice::Cvm,
        PriorChoice::Mlp,
        PriorChoice::GatDet,
        PriorChoice::GatStoch,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PriorChoice::None => "none",
            PriorChoice::Cvm => "cvm",
            PriorChoice::Mlp => "mlp",
            PriorChoice::GatDet => "gat-det",
            PriorChoice::GatStoch => "gat-stoch",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == s)
    }

    /// Weights file stem the prior loads, if any.
    pub fn network(self) -> Option<&'static str> {
        match self {
            PriorChoice::None | PriorChoice::Cvm => None,
            PriorChoice::Mlp => Some("mlp"),
            PriorChoice::GatDet | PriorChoice::GatStoch => Some("gat"),
        }
    }
}

impl fmt::Display for PriorChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { n_train: 200, n_test: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    /// Episode seeds derive from this one.
    pub master: u64,
    pub train: u64,
    /// Monte Carlo rollouts of the stochastic prior.
    pub rollout: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        Self {
            master: 2024,
            train: 7,
            rollout: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub kind: PriorChoice,
    /// Monte Carlo rollouts per forecast.
    pub samples: usize,
    /// Velocity perturbation std, m/s.
    pub sigma_sto: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        let p = StochasticParams::default();
        Self {
            kind: PriorChoice::GatStoch,
            samples: p.samples,
            sigma_sto: p.sigma,
        }
    }
}

impl PriorSection {
    pub fn stochastic(&self, seed: u64) -> StochasticParams {
        StochasticParams {
            samples: self.samples,
            sigma: self.sigma_sto,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub weights_dir: PathBuf,
    pub results_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data_dir: "out/data".into(),
            weights_dir: "out/weights".into(),
            results_dir: "out/results".into(),
            report_dir: "out/report".into(),
        }
    }
}

/// Everything a pipeline run needs, one TOML section per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub seeds: SeedSection,
    pub paths: PathsSection,
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub prior: PriorSection,
    pub slam: SlamConfig,
    pub metrics: MetricOptions,
}

fn field_error(field: impl Into<String>, message: impl fmt::Display) -> CliError {
    CliError::Validation(format!("{}: {message}", field.into()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.data.n_train == 0 {
            return Err(field_error("data.n_train", "must be positive"));
        }
        if self.data.n_test == 0 {
            return Err(field_error("data.n_test", "must be positive"));
        }
        self.sim
            .validate()
            .map_err(|e| field_error(format!("sim.{}", e.field), e.message))?;
        self.train.validate().map_err(|e| field_error("train", e))?;
        if self.train.dt != self.sim.dt {
            return Err(field_error("train.dt", "must equal sim.dt"));
        }
        if self.slam.prior.radius != self.train.radius {
            return Err(field_error("slam.prior.radius", "must equal train.radius"));
        }
        if self.prior.kind == PriorChoice::GatStoch {
            self.prior.stochastic(self.seeds.rollout).validate().map_err(|e| field_error("prior", e))?;
        }
        self.slam.validate().map_err(|e| match e {
            crowdslam::slam::SlamError::Config { field, message } => field_error(format!("slam.{field}"), message),
            other => field_error("slam", other),
        })?;
        if self.metrics.horizon == Some(0) {
            return Err(field_error("metrics.horizon", "must be positive"));
        }
        Ok(())
    }
}

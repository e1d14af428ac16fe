//! Kinematic priors on pedestrian trajectories: constant velocity, a
//! single-agent MLP and deterministic or stochastic graph attention rollouts.
//!
//! Each prior yields two things from the MAP histories of the tracked
//! pedestrians: factor specifications for the next transition and horizon
//! forecasts. The factor for transition `i-1 -> i` is the first step of the
//! forecast issued at `i-1`, so a window update never runs a network twice on
//! the same history.

mod cvm;
mod rollout;

use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Cov2, Point2};
use crate::neuralnet::{GatWeights, MlpWeights, NnError};

pub use cvm::{cvm_residual_position, cvm_residuals_velocity};
pub use rollout::{
    empirical_stats, forecast, gat_rollout_deterministic, gat_rollout_stochastic, mlp_predict, mlp_rollout,
};

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("prior {0} needs network weights")]
    MissingWeights(&'static str),
    #[error("pedestrian {ped_id} has {have} history states, {need} required")]
    InsufficientHistory { ped_id: u32, have: usize, need: usize },
    #[error("scene has no pedestrians")]
    EmptyScene,
    #[error("histories are not co-temporal")]
    NotCoTemporal,
    #[error("need at least 2 rollout samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid prior parameter {field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error(transparent)]
    Network(#[from] NnError),
}

fn invalid(field: &'static str, message: impl Into<String>) -> PriorError {
    PriorError::Invalid {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticParams {
    /// Rollouts per forecast (`N`).
    pub samples: usize,
    /// Velocity perturbation std, m/s.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for StochasticParams {
    fn default() -> Self {
        Self {
            samples: 32,
            sigma: 0.05,
            seed: 0,
        }
    }
}

impl StochasticParams {
    pub fn validate(&self) -> Result<(), PriorError> {
        if self.samples < 2 {
            return Err(PriorError::TooFewSamples(self.samples));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(invalid("sigma_sto", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PriorKind {
    NoPrior,
    Cvm,
    SingleAgentMlp(Arc<MlpWeights>),
    DeterministicGat(Arc<GatWeights>),
    StochasticGat(Arc<GatWeights>, StochasticParams),
}

impl PriorKind {
    pub fn label(&self) -> &'static str {
        match self {
            PriorKind::NoPrior => "none",
            PriorKind::Cvm => "cvm",
            PriorKind::SingleAgentMlp(_) => "mlp",
            PriorKind::DeterministicGat(_) => "gat-det",
            PriorKind::StochasticGat(..) => "gat-stoch",
        }
    }

    /// Smallest history a pedestrian needs before this prior applies.
    pub fn required_history(&self) -> Option<usize> {
        match self {
            PriorKind::NoPrior => None,
            PriorKind::Cvm => Some(2),
            PriorKind::SingleAgentMlp(w) => Some(w.input_dim() / 2 + 1),
            PriorKind::DeterministicGat(w) | PriorKind::StochasticGat(w, _) => Some(w.history_len()),
        }
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        match self {
            PriorKind::SingleAgentMlp(w) if w.output_dim() != 2 || w.input_dim() % 2 != 0 => {
                Err(invalid("weights", "MLP must map 2(H-1) inputs to 2 outputs"))
            }
            PriorKind::StochasticGat(_, p) => p.validate(),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvmForm {
    /// Second-difference factor on positions only.
    Position,
    /// Explicit velocity nodes with position and velocity residuals.
    Velocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovSpace {
    /// Rollout velocity covariance scaled to displacement units by `dt^2`.
    Displacement,
    /// Rollout velocity covariance used as is on the displacement residual.
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub cvm_form: CvmForm,
    /// Position process noise of the velocity-form CVM, m.
    pub sigma_cvm_position: f64,
    /// Per-step velocity change std of the CVM, m/s.
    pub sigma_cvm_velocity: f64,
    /// Isotropic displacement std of MLP and deterministic GAT factors, m.
    pub sigma_nn: f64,
    /// Covariance regulariser added to rollout covariances, (m/s)^2.
    pub eps_reg: f64,
    pub cov_space: CovSpace,
    /// Attention neighbourhood radius, m.
    pub radius: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            cvm_form: CvmForm::Position,
            sigma_cvm_position: 0.02,
            sigma_cvm_velocity: 0.1,
            sigma_nn: 0.1,
            eps_reg: 1e-4,
            cov_space: CovSpace::Velocity,
            radius: 4.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), PriorError> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.sigma_cvm_position) {
            return Err(invalid("sigma_cvm_position", "must be positive"));
        }
        if !pos(self.sigma_cvm_velocity) {
            return Err(invalid("sigma_cvm_velocity", "must be positive"));
        }
        if !pos(self.sigma_nn) {
            return Err(invalid("sigma_nn", "must be positive"));
        }
        if !pos(self.eps_reg) {
            return Err(invalid("eps_reg", "must be positive"));
        }
        if !pos(self.radius) {
            return Err(invalid("radius", "must be positive"));
        }
        Ok(())
    }
}

/// MAP positions of one pedestrian over consecutive steps ending at
/// `last_step`, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryBuffer {
    pub ped_id: u32,
    pub last_step: usize,
    positions: Vec<Point2>,
}

impl HistoryBuffer {
    pub fn new(ped_id: u32, last_step: usize, positions: Vec<Point2>) -> Result<Self, PriorError> {
        if positions.is_empty() || positions.len() > last_step + 1 {
            return Err(invalid("history", "length must be in 1..=last_step+1"));
        }
        if positions.iter().any(|p| !p.is_finite()) {
            return Err(invalid("history", "non-finite position"));
        }
        Ok(Self {
            ped_id,
            last_step,
            positions,
        })
    }

    pub fn positions(&self) -> &[Point2] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn last(&self) -> Point2 {
        self.positions[self.positions.len() - 1]
    }

    /// The newest `h` positions.
    pub fn tail(&self, h: usize) -> &[Point2] {
        &self.positions[self.positions.len() - h..]
    }
}

/// `N` sampled futures of one pedestrian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSet {
    pub ped_id: u32,
    /// Position at the start of the rollout.
    pub origin: Point2,
    /// `positions[s][t]`, `t = 0` is one step ahead.
    pub positions: Vec<Vec<Point2>>,
    pub velocities: Vec<Vec<Vector2<f64>>>,
}

impl RolloutSet {
    pub fn samples(&self) -> usize {
        self.positions.len()
    }

    pub fn horizon(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }
}

/// Per-step velocity mean and covariance of a rollout set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub ped_id: u32,
    pub mean: Vec<Vector2<f64>>,
    pub cov: Vec<Cov2>,
}

/// Horizon forecast of one pedestrian starting after `HistoryBuffer::last_step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedForecast {
    pub ped_id: u32,
    /// Predicted velocities, one per future step, m/s.
    pub velocities: Vec<Vector2<f64>>,
    pub positions: Vec<Point2>,
    /// Position covariance per future step (stochastic GAT only).
    pub position_cov: Option<Vec<Cov2>>,
    pub stats: Option<RolloutStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PriorFactorSpec {
    /// Zero second difference over `step-2, step-1, step`.
    CvmPosition { ped_id: u32, step: usize, information: Matrix2<f64> },
    /// Position/velocity consistency and zero velocity change over `step-1, step`.
    CvmVelocity {
        ped_id: u32,
        step: usize,
        information_position: Matrix2<f64>,
        information_velocity: Matrix2<f64>,
    },
    /// `m[step] - m[step-1]` should equal `mean` (meters).
    Displacement {
        ped_id: u32,
        step: usize,
        mean: Vector2<f64>,
        information: Matrix2<f64>,
        mahalanobis: bool,
    },
}

impl PriorFactorSpec {
    pub fn ped_id(&self) -> u32 {
        match *self {
            PriorFactorSpec::CvmPosition { ped_id, .. }
            | PriorFactorSpec::CvmVelocity { ped_id, .. }
            | PriorFactorSpec::Displacement { ped_id, .. } => ped_id,
        }
    }

    pub fn step(&self) -> usize {
        match *self {
            PriorFactorSpec::CvmPosition { step, .. }
            | PriorFactorSpec::CvmVelocity { step, .. }
            | PriorFactorSpec::Displacement { step, .. } => step,
        }
    }

    /// Scales every information block by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            PriorFactorSpec::CvmPosition { information, .. } | PriorFactorSpec::Displacement { information, .. } => {
                *information *= alpha
            }
            PriorFactorSpec::CvmVelocity {
                information_position,
                information_velocity,
                ..
            } => {
                *information_position *= alpha;
                *information_velocity *= alpha;
            }
        }
        out
    }
}

/// Information of the CVM position form: the second difference over `dt^2`
/// is an acceleration, and `accel * dt` is a velocity change with std
/// `sigma_cvm_velocity`.
pub fn cvm_position_information(config: &PriorConfig, dt: f64) -> Matrix2<f64> {
    Matrix2::identity() * (dt * dt / (config.sigma_cvm_velocity * config.sigma_cvm_velocity))
}

/// Factor for the transition into `step` built from a forecast issued at
/// `step - 1`. CVM factors need no forecast.
pub fn factor_from_forecast(
    kind: &PriorKind,
    config: &PriorConfig,
    forecast: &PedForecast,
    step: usize,
    dt: f64,
) -> Option<PriorFactorSpec> {
    let v = *forecast.velocities.first()?;
    match kind {
        PriorKind::NoPrior | PriorKind::Cvm => None,
        PriorKind::SingleAgentMlp(_) | PriorKind::DeterministicGat(_) => Some(PriorFactorSpec::Displacement {
            ped_id: forecast.ped_id,
            step,
            mean: v * dt,
            information: Matrix2::identity() / (config.sigma_nn * config.sigma_nn),
            mahalanobis: false,
        }),
        PriorKind::StochasticGat(..) => {
            let stats = forecast.stats.as_ref()?;
            let cov = stats.cov.first()?.matrix();
            let cov = match config.cov_space {
                CovSpace::Displacement => cov * (dt * dt),
                CovSpace::Velocity => *cov,
            };
            let information = Cov2::new(cov).ok()?.information();
            Some(PriorFactorSpec::Displacement {
                ped_id: forecast.ped_id,
                step,
                mean: stats.mean[0] * dt,
                information,
                mahalanobis: true,
            })
        }
    }
}

/// Kinematic factors for the transition from `scene[..].last_step` to the
/// next step. Pedestrians with too short a history get no factor.
pub fn make_prior_factors(
    kind: &PriorKind,
    config: &PriorConfig,
    scene: &[HistoryBuffer],
    dt: f64,
) -> Result<Vec<PriorFactorSpec>, PriorError> {
    kind.validate()?;
    let Some(first) = scene.first() else {
        return Ok(Vec::new());
    };
    let step = first.last_step + 1;
    match kind {
        PriorKind::NoPrior => Ok(Vec::new()),
        PriorKind::Cvm => Ok(scene
            .iter()
            .filter_map(|h| match config.cvm_form {
                CvmForm::Position if h.len() >= 2 => Some(PriorFactorSpec::CvmPosition {
                    ped_id: h.ped_id,
                    step,
                    information: cvm_position_information(config, dt),
                }),
                CvmForm::Velocity => Some(PriorFactorSpec::CvmVelocity {
                    ped_id: h.ped_id,
                    step,
                    information_position: Matrix2::identity()
                        / (config.sigma_cvm_position * config.sigma_cvm_position),
                    information_velocity: Matrix2::identity()
                        / (config.sigma_cvm_velocity * config.sigma_cvm_velocity),
                }),
                _ => None,
            })
            .collect()),
        _ => {
            let need = kind.required_history().expect("neural kinds need history");
            let eligible: Vec<HistoryBuffer> = scene.iter().filter(|h| h.len() >= need).cloned().collect();
            if eligible.is_empty() {
                return Ok(Vec::new());
            }
            let forecasts = forecast(kind, config, &eligible, 1, dt)?;
            Ok(forecasts
                .iter()
                .filter_map(|f| factor_from_forecast(kind, config, f, step, dt))
                .collect())
        }
    }
}

//! Sliding-window dynamic GraphSLAM over robot poses and time-indexed
//! pedestrian positions.
//!
//! Every step rebuilds the window graph from the episode measurements and
//! the previous MAP estimates, solves it with Levenberg-Marquardt and then
//! issues horizon forecasts from the MAP histories. The oldest retained pose
//! (and, under a kinematic prior, the oldest retained landmark states) are
//! re-anchored at their previous MAP values instead of being marginalized.
//!
//! Neural prior factors are cached: the factor on transition `i-1 -> i` is
//! the first step of the forecast issued after solving window `i-1`.

mod graph;
mod solver;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{Matrix2, Matrix3, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EpisodeRecord;
use crate::geometry::{inverse_observation, motion_model, Cov2, Point2, Pose2};
use crate::priors::{
    cvm_position_information, factor_from_forecast, forecast, CvmForm, HistoryBuffer, PedForecast, PriorConfig,
    PriorError, PriorFactorSpec, PriorKind,
};
use crate::simulator::SensorParams;

pub use graph::{Factor, FactorGraph, FactorKind, Measurement, VariableId, VariableKind};
pub use solver::{solve, BandedCholesky, BandedMatrix, PivotFailure, SolveDiagnostics, SolverSettings};

#[derive(Debug, Error)]
pub enum SlamError {
    #[error("{0:?} factor information is not symmetric positive definite")]
    InformationNotSpd(FactorKind),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("factor refers to missing variable {0:?}")]
    MissingVariable(VariableId),
    #[error("normal equations singular at {variable:?}")]
    Singular { variable: VariableId },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid slam config field `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<SlamError>,
    },
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed result file: {0}")]
    Parse(String),
}

fn config_error(field: &'static str, message: impl Into<String>) -> SlamError {
    SlamError::Config {
        field,
        message: message.into(),
    }
}

/// Factor noise; defaults match the simulator's generating values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub sigma_range: f64,
    pub sigma_bearing: f64,
    pub sigma_v: f64,
    pub sigma_omega: f64,
    /// Lateral slip of the unicycle, meters per step.
    pub sigma_lateral: f64,
    /// Lower bound applied to every sigma.
    pub sigma_floor: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::from_sensor(&SensorParams::default())
    }
}

impl NoiseModel {
    pub fn from_sensor(s: &SensorParams) -> Self {
        Self {
            sigma_range: s.sigma_range,
            sigma_bearing: s.sigma_bearing,
            sigma_v: s.sigma_v,
            sigma_omega: s.sigma_omega,
            sigma_lateral: 1e-3,
            sigma_floor: 1e-6,
        }
    }

    fn var(&self, sigma: f64) -> f64 {
        let s = sigma.max(self.sigma_floor);
        s * s
    }

    pub fn observation_information(&self) -> Matrix2<f64> {
        Matrix2::from_diagonal(&Vector2::new(
            1.0 / self.var(self.sigma_range),
            1.0 / self.var(self.sigma_bearing),
        ))
    }

    pub fn odometry_information(&self, dt: f64) -> Matrix3<f64> {
        Matrix3::from_diagonal(&nalgebra::Vector3::new(
            1.0 / self.var(self.sigma_v * dt),
            1.0 / self.var(self.sigma_lateral),
            1.0 / self.var(self.sigma_omega * dt),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    /// Pose anchor sigmas `(x, y, theta)`.
    pub pose_sigma: [f64; 3],
    pub landmark_sigma: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            pose_sigma: [0.01, 0.01, 0.005],
            landmark_sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlamConfig {
    /// Window length in steps.
    pub window: usize,
    /// Forecast horizon in steps.
    pub horizon: usize,
    /// In-window estimates a pedestrian needs before forecasts are issued.
    pub history_len: usize,
    pub noise: NoiseModel,
    pub anchor: AnchorConfig,
    pub solver: SolverSettings,
    pub prior: PriorConfig,
    /// Multiplier on every kinematic information matrix; 0 drops them.
    pub prior_scale: f64,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            window: 20,
            horizon: 20,
            history_len: 8,
            noise: NoiseModel::default(),
            anchor: AnchorConfig::default(),
            solver: SolverSettings::default(),
            prior: PriorConfig::default(),
            prior_scale: 1.0,
        }
    }
}

impl SlamConfig {
    /// Default config with factor noise matched to `sensor`.
    pub fn for_sensor(sensor: &SensorParams) -> Self {
        Self {
            noise: NoiseModel::from_sensor(sensor),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SlamError> {
        let pos = |field, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(config_error(field, format!("must be positive, got {v}")))
            }
        };
        let non_neg = |field, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(config_error(field, format!("must be non-negative, got {v}")))
            }
        };
        if self.window < 2 {
            return Err(config_error("window", "must be at least 2"));
        }
        if self.horizon == 0 {
            return Err(config_error("horizon", "must be at least 1"));
        }
        if self.history_len < 2 || self.history_len > self.window {
            return Err(config_error("history_len", "must lie in [2, window]"));
        }
        let n = &self.noise;
        non_neg("noise.sigma_range", n.sigma_range)?;
        non_neg("noise.sigma_bearing", n.sigma_bearing)?;
        non_neg("noise.sigma_v", n.sigma_v)?;
        non_neg("noise.sigma_omega", n.sigma_omega)?;
        non_neg("noise.sigma_lateral", n.sigma_lateral)?;
        pos("noise.sigma_floor", n.sigma_floor)?;
        for s in self.anchor.pose_sigma {
            pos("anchor.pose_sigma", s)?;
        }
        pos("anchor.landmark_sigma", self.anchor.landmark_sigma)?;
        if self.solver.max_iterations == 0 {
            return Err(config_error("solver.max_iterations", "must be at least 1"));
        }
        pos("solver.step_tolerance", self.solver.step_tolerance)?;
        pos("solver.initial_lambda", self.solver.initial_lambda)?;
        non_neg("solver.singular_tolerance", self.solver.singular_tolerance)?;
        non_neg("prior_scale", self.prior_scale)?;
        self.prior.validate()?;
        Ok(())
    }
}

/// MAP estimates carried between windows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Estimates {
    pub poses: BTreeMap<usize, Pose2>,
    pub landmarks: BTreeMap<(u32, usize), Point2>,
    pub velocities: BTreeMap<(u32, usize), Vector2<f64>>,
}

impl Estimates {
    fn absorb(&mut self, g: &FactorGraph) {
        for id in g.variables() {
            match id.kind {
                VariableKind::RobotPose => {
                    self.poses.insert(id.step, g.pose(id.step).expect("pose in graph"));
                }
                VariableKind::LandmarkPos => {
                    self.landmarks
                        .insert((id.ped, id.step), g.landmark(id.ped, id.step).expect("landmark in graph"));
                }
                VariableKind::LandmarkVel => {
                    self.velocities
                        .insert((id.ped, id.step), g.velocity(id.ped, id.step).expect("velocity in graph"));
                }
            }
        }
    }
}

/// First step of the window ending at `i_now`.
pub fn window_start(i_now: usize, window: usize) -> usize {
    (i_now + 1).saturating_sub(window)
}

fn kinematic_active(kind: &PriorKind, config: &SlamConfig) -> bool {
    !matches!(kind, PriorKind::NoPrior) && config.prior_scale > 0.0
}

fn spec_to_factor(spec: &PriorFactorSpec, dt: f64) -> Result<Factor, SlamError> {
    match *spec {
        PriorFactorSpec::CvmPosition {
            ped_id,
            step,
            information,
        } => Factor::cvm_position(
            [
                VariableId::landmark(ped_id, step - 2),
                VariableId::landmark(ped_id, step - 1),
                VariableId::landmark(ped_id, step),
            ],
            dt,
            information,
        ),
        PriorFactorSpec::CvmVelocity {
            ped_id,
            step,
            information_position,
            information_velocity,
        } => Factor::cvm_velocity(
            [
                VariableId::landmark(ped_id, step - 1),
                VariableId::landmark(ped_id, step),
                VariableId::velocity(ped_id, step - 1),
                VariableId::velocity(ped_id, step),
            ],
            dt,
            information_position,
            information_velocity,
        ),
        PriorFactorSpec::Displacement {
            ped_id,
            step,
            mean,
            information,
            mahalanobis,
        } => Factor::displacement(
            VariableId::landmark(ped_id, step - 1),
            VariableId::landmark(ped_id, step),
            mean,
            information,
            mahalanobis,
        ),
    }
}

/// Cached neural factors keyed by `(ped, step)` of the transition target.
pub type FactorCache = HashMap<(u32, usize), PriorFactorSpec>;

/// Window graph over steps `i_min..=i_now`.
///
/// Initial values come from `estimates` where available; new poses are
/// dead-reckoned from odometry and new landmarks back-projected from their
/// observation.
pub fn build_window_graph(
    episode: &EpisodeRecord,
    i_min: usize,
    i_now: usize,
    estimates: &Estimates,
    kind: &PriorKind,
    cache: &FactorCache,
    config: &SlamConfig,
) -> Result<FactorGraph, SlamError> {
    if i_min > i_now || i_now >= episode.len() {
        return Err(SlamError::InvalidGraph(format!("bad window [{i_min}, {i_now}]")));
    }
    let dt = episode.dt();
    let mut g = FactorGraph::new(i_min, i_now);

    let mut poses: Vec<Pose2> = Vec::with_capacity(i_now - i_min + 1);
    for i in i_min..=i_now {
        let p = match estimates.poses.get(&i) {
            Some(p) => *p,
            None if i == 0 => episode.steps[0].robot,
            None => {
                let prev = match poses.last() {
                    Some(p) => *p,
                    None => return Err(SlamError::InvalidGraph(format!("no estimate for pose {}", i - 1))),
                };
                let u = episode.steps[i]
                    .odometry
                    .ok_or_else(|| SlamError::InvalidGraph(format!("missing odometry at step {i}")))?;
                motion_model(&prev, &u.u_meas, dt).map_err(|_| SlamError::NonFinite("dead reckoning"))?
            }
        };
        g.add_pose(i, p)?;
        poses.push(p);
    }

    // Observed landmark states.
    let mut observed: BTreeMap<(u32, usize), Point2> = BTreeMap::new();
    for i in i_min..=i_now {
        for o in &episode.steps[i].observations {
            let init = estimates
                .landmarks
                .get(&(o.ped_id, i))
                .copied()
                .unwrap_or_else(|| inverse_observation(&poses[i - i_min], &o.z));
            observed.insert((o.ped_id, i), init);
        }
    }
    // Time-major insertion keeps slot order close to the solver order.
    let mut by_step: Vec<((u32, usize), Point2)> = observed.iter().map(|(k, v)| (*k, *v)).collect();
    by_step.sort_by_key(|((ped, step), _)| (*step, *ped));
    for ((ped, step), p) in &by_step {
        g.add_landmark(*ped, *step, *p)?;
    }

    let active = kinematic_active(kind, config);
    let velocity_form = active && matches!(kind, PriorKind::Cvm) && config.prior.cvm_form == CvmForm::Velocity;
    if velocity_form {
        for ((ped, step), p) in &by_step {
            let prev = observed.get(&(*ped, step.wrapping_sub(1)));
            let next = observed.get(&(*ped, step + 1));
            if prev.is_none() && next.is_none() {
                continue;
            }
            let init = estimates.velocities.get(&(*ped, *step)).copied().unwrap_or_else(|| match (prev, next) {
                (Some(a), _) => (p.vector() - a.vector()) / dt,
                (None, Some(b)) => (b.vector() - p.vector()) / dt,
                (None, None) => Vector2::zeros(),
            });
            g.add_velocity(*ped, *step, init)?;
        }
    }

    // Anchors.
    let s = config.anchor.pose_sigma;
    let pose_info = Matrix3::from_diagonal(&nalgebra::Vector3::new(
        1.0 / (s[0] * s[0]),
        1.0 / (s[1] * s[1]),
        1.0 / (s[2] * s[2]),
    ));
    let anchor_pose = if i_min == 0 {
        episode.steps[0].robot
    } else {
        *estimates
            .poses
            .get(&i_min)
            .ok_or_else(|| SlamError::InvalidGraph(format!("no estimate for anchored pose {i_min}")))?
    };
    g.add_factor(Factor::pose_anchor(VariableId::pose(i_min), anchor_pose, pose_info)?)?;
    if active && i_min > 0 {
        let info = Matrix2::identity() / (config.anchor.landmark_sigma * config.anchor.landmark_sigma);
        for o in &episode.steps[i_min].observations {
            let was_seen = episode.steps[i_min - 1].observations.iter().any(|q| q.ped_id == o.ped_id);
            if let (true, Some(m)) = (was_seen, estimates.landmarks.get(&(o.ped_id, i_min))) {
                g.add_factor(Factor::landmark_anchor(VariableId::landmark(o.ped_id, i_min), *m, info)?)?;
            }
        }
    }

    let odo_info = config.noise.odometry_information(dt);
    for i in i_min + 1..=i_now {
        let u = episode.steps[i]
            .odometry
            .ok_or_else(|| SlamError::InvalidGraph(format!("missing odometry at step {i}")))?
            .u_meas;
        g.add_factor(Factor::odometry(
            VariableId::pose(i - 1),
            VariableId::pose(i),
            [u.v * dt, 0.0, u.omega * dt],
            odo_info,
        )?)?;
    }

    let obs_info = config.noise.observation_information();
    for i in i_min..=i_now {
        for o in &episode.steps[i].observations {
            g.add_factor(Factor::observation(
                VariableId::pose(i),
                VariableId::landmark(o.ped_id, i),
                o.z,
                obs_info,
            )?)?;
        }
    }

    if active {
        let alpha = config.prior_scale;
        for &(ped, step) in observed.keys() {
            if step == i_min || !observed.contains_key(&(ped, step - 1)) {
                continue;
            }
            let spec = match kind {
                PriorKind::NoPrior => None,
                PriorKind::Cvm => match config.prior.cvm_form {
                    CvmForm::Position => (step >= i_min + 2 && observed.contains_key(&(ped, step - 2))).then(|| {
                        PriorFactorSpec::CvmPosition {
                            ped_id: ped,
                            step,
                            information: cvm_position_information(&config.prior, dt),
                        }
                    }),
                    CvmForm::Velocity => Some(PriorFactorSpec::CvmVelocity {
                        ped_id: ped,
                        step,
                        information_position: Matrix2::identity()
                            / (config.prior.sigma_cvm_position * config.prior.sigma_cvm_position),
                        information_velocity: Matrix2::identity()
                            / (config.prior.sigma_cvm_velocity * config.prior.sigma_cvm_velocity),
                    }),
                },
                _ => cache.get(&(ped, step)).cloned(),
            };
            if let Some(spec) = spec {
                g.add_factor(spec_to_factor(&spec.scaled(alpha), dt)?)?;
            }
        }
    }
    Ok(g)
}

/// Contiguous MAP track of every pedestrian present at `graph.i_now`.
pub fn window_histories(graph: &FactorGraph) -> Vec<HistoryBuffer> {
    let now = graph.i_now;
    let mut out = Vec::new();
    for id in graph.variables() {
        if id.kind != VariableKind::LandmarkPos || id.step != now {
            continue;
        }
        let mut track = Vec::new();
        let mut s = now;
        while let Some(p) = graph.landmark(id.ped, s) {
            track.push(p);
            if s == graph.i_min {
                break;
            }
            s -= 1;
        }
        track.reverse();
        out.push(HistoryBuffer::new(id.ped, now, track).expect("track is non-empty"));
    }
    out.sort_by_key(|h| h.ped_id);
    out
}

/// Horizon forecast emitted at `step` for one pedestrian. Empty
/// `positions` mark a prior that cannot predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub step: usize,
    pub ped_id: u32,
    /// MAP position at emission.
    pub origin: Point2,
    pub positions: Vec<Point2>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_cov: Option<Vec<Cov2>>,
    /// Per-step velocity mean of the rollouts (stochastic prior).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity_mean: Option<Vec<Vector2<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity_cov: Option<Vec<Cov2>>,
}

fn history_need(kind: &PriorKind, config: &SlamConfig) -> usize {
    kind.required_history().unwrap_or(0).max(config.history_len)
}

fn window_forecasts(
    graph: &FactorGraph,
    kind: &PriorKind,
    config: &SlamConfig,
    dt: f64,
) -> Result<(Vec<HistoryBuffer>, Vec<PedForecast>), SlamError> {
    let need = history_need(kind, config);
    let scene: Vec<HistoryBuffer> = window_histories(graph).into_iter().filter(|h| h.len() >= need).collect();
    if scene.is_empty() {
        return Ok((scene, Vec::new()));
    }
    let f = forecast(kind, &config.prior, &scene, config.horizon, dt)?;
    Ok((scene, f))
}

fn to_predictions(step: usize, scene: &[HistoryBuffer], forecasts: &[PedForecast]) -> Vec<Prediction> {
    scene
        .iter()
        .map(|h| {
            let f = forecasts.iter().find(|f| f.ped_id == h.ped_id);
            Prediction {
                step,
                ped_id: h.ped_id,
                origin: h.last(),
                positions: f.map(|f| f.positions.clone()).unwrap_or_default(),
                position_cov: f.and_then(|f| f.position_cov.clone()),
                velocity_mean: f.and_then(|f| f.stats.as_ref().map(|s| s.mean.clone())),
                velocity_cov: f.and_then(|f| f.stats.as_ref().map(|s| s.cov.clone())),
            }
        })
        .collect()
}

/// Forecasts from the MAP histories of a solved window, one per pedestrian
/// with enough in-window history.
pub fn predict_future(
    graph: &FactorGraph,
    kind: &PriorKind,
    config: &SlamConfig,
    dt: f64,
) -> Result<Vec<Prediction>, SlamError> {
    let (scene, f) = window_forecasts(graph, kind, config, dt)?;
    Ok(to_predictions(graph.i_now, &scene, &f))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkEstimate {
    pub step: usize,
    pub ped_id: u32,
    pub position: Point2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    #[serde(flatten)]
    pub solve: SolveDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlamResult {
    pub method: String,
    pub seed: u64,
    pub dt: f64,
    pub horizon: usize,
    /// Last-window MAP pose per step.
    pub robot: Vec<Pose2>,
    /// Last-window MAP position per observed `(ped, step)`, step-major.
    pub landmarks: Vec<LandmarkEstimate>,
    pub predictions: Vec<Prediction>,
    /// False when the prior cannot forecast; predictions then only carry
    /// their origin.
    pub predictions_available: bool,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl SlamResult {
    pub fn save(&self, path: &Path) -> Result<(), SlamError> {
        let text = serde_json::to_string(self).map_err(|e| SlamError::Parse(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| SlamError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SlamError> {
        let text = std::fs::read_to_string(path).map_err(|source| SlamError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| SlamError::Parse(e.to_string()))
    }

    pub fn landmark_map(&self) -> BTreeMap<(u32, usize), Point2> {
        self.landmarks.iter().map(|l| ((l.ped_id, l.step), l.position)).collect()
    }
}

/// Runs the estimator over a whole episode.
pub fn run_sequence(episode: &EpisodeRecord, kind: &PriorKind, config: &SlamConfig) -> Result<SlamResult, SlamError> {
    config.validate()?;
    kind.validate()?;
    episode
        .validate()
        .map_err(|e| SlamError::InvalidGraph(format!("episode: {e}")))?;
    let dt = episode.dt();
    let neural = matches!(
        kind,
        PriorKind::SingleAgentMlp(_) | PriorKind::DeterministicGat(_) | PriorKind::StochasticGat(..)
    );
    let cache_factors = neural && kinematic_active(kind, config);

    let mut estimates = Estimates::default();
    let mut cache = FactorCache::new();
    let mut predictions = Vec::new();
    let mut diagnostics = Vec::with_capacity(episode.len());

    for i_now in 0..episode.len() {
        let at = |e: SlamError| SlamError::AtStep {
            step: i_now,
            source: Box::new(e),
        };
        let i_min = window_start(i_now, config.window);
        let mut g = build_window_graph(episode, i_min, i_now, &estimates, kind, &cache, config).map_err(at)?;
        let diag = solve(&mut g, &config.solver).map_err(at)?;
        diagnostics.push(StepDiagnostics { step: i_now, solve: diag });
        estimates.absorb(&g);

        let (scene, forecasts) = window_forecasts(&g, kind, config, dt).map_err(at)?;
        if cache_factors {
            for f in &forecasts {
                if let Some(spec) = factor_from_forecast(kind, &config.prior, f, i_now + 1, dt) {
                    cache.insert((f.ped_id, i_now + 1), spec);
                }
            }
        }
        predictions.extend(to_predictions(i_now, &scene, &forecasts));
        cache.retain(|&(_, step), _| step > i_min);
    }

    let robot: Vec<Pose2> = (0..episode.len()).map(|i| estimates.poses[&i]).collect();
    let mut landmarks: Vec<LandmarkEstimate> = estimates
        .landmarks
        .iter()
        .map(|(&(ped_id, step), &position)| LandmarkEstimate { step, ped_id, position })
        .collect();
    landmarks.sort_by_key(|l| (l.step, l.ped_id));
    Ok(SlamResult {
        method: kind.label().to_string(),
        seed: episode.seed,
        dt,
        horizon: config.horizon,
        robot,
        landmarks,
        predictions,
        predictions_available: !matches!(kind, PriorKind::NoPrior),
        diagnostics,
    })
}

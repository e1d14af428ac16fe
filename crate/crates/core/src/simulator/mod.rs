//! Ground-truth world generation: a headed social-force crowd, a sampling-MPC
//! robot and noisy odometry / range-bearing sensing.
//!
//! Every operation is a pure function of its inputs and an explicit RNG, so
//! an episode is fully determined by `(config, seed)`.

mod hsfm;
mod mpc;

pub use hsfm::hsfm_force;
pub use mpc::{mpc_candidates, mpc_control, rollout_cost, rollout_robot, RolloutCost};

use nalgebra::Vector2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{EpisodeRecord, StepRecord};
use crate::geometry::{motion_model, normalize_angle, observation_model, Control, Point2, Pose2, RangeBearing};
use crate::rng::{self, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid simulator config field `{field}`: {message}")]
pub struct SimConfigError {
    pub field: String,
    pub message: String,
}

fn invalid(field: &str, message: impl Into<String>) -> SimConfigError {
    SimConfigError {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Arena {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for Arena {
    fn default() -> Self {
        Self {
            x_min: -6.0,
            x_max: 6.0,
            y_min: -6.0,
            y_max: 6.0,
        }
    }
}

impl Arena {
    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    fn sample(&self, margin: f64, rng: &mut Rng) -> Point2 {
        Point2::new(
            rng.random_range(self.x_min + margin..=self.x_max - margin),
            rng.random_range(self.y_min + margin..=self.y_max - margin),
        )
    }
}

/// Headed social-force parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HsfmParams {
    /// τ, seconds.
    pub relaxation_time: f64,
    /// A, newtons (unit mass).
    pub repulsion_strength: f64,
    /// B, meters.
    pub repulsion_range: f64,
    /// r, meters.
    pub body_radius: f64,
    /// Heading relaxation rate, 1/s.
    pub heading_gain: f64,
    /// λ: factor applied to the force component orthogonal to the heading.
    pub lateral_attenuation: f64,
    pub desired_speed_min: f64,
    pub desired_speed_max: f64,
    /// Speed clamp as a multiple of the desired speed.
    pub max_speed_factor: f64,
    /// Goal is re-sampled once the pedestrian is this close, meters.
    pub goal_tolerance: f64,
}

impl Default for HsfmParams {
    fn default() -> Self {
        Self {
            relaxation_time: 0.5,
            repulsion_strength: 2.0,
            repulsion_range: 0.35,
            body_radius: 0.3,
            heading_gain: 4.0,
            lateral_attenuation: 0.3,
            desired_speed_min: 0.8,
            desired_speed_max: 1.4,
            max_speed_factor: 1.3,
            goal_tolerance: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorParams {
    pub fov_radius: f64,
    pub sigma_range: f64,
    pub sigma_bearing: f64,
    pub sigma_v: f64,
    pub sigma_omega: f64,
}

impl Default for SensorParams {
    fn default() -> Self {
        Self {
            fov_radius: 5.0,
            sigma_range: 0.1,
            sigma_bearing: 0.05,
            sigma_v: 0.05,
            sigma_omega: 0.05,
        }
    }
}

impl SensorParams {
    pub fn noiseless(&self) -> Self {
        Self {
            sigma_range: 0.0,
            sigma_bearing: 0.0,
            sigma_v: 0.0,
            sigma_omega: 0.0,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotParams {
    pub v_max: f64,
    pub omega_max: f64,
    /// Robot goal is re-sampled once within this distance, meters.
    pub goal_tolerance: f64,
}

impl Default for RobotParams {
    fn default() -> Self {
        Self {
            v_max: 1.5,
            omega_max: 1.0,
            goal_tolerance: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcParams {
    pub horizon: usize,
    /// Random control sequences drawn on top of the fixed lattice.
    pub sample_count: usize,
    pub goal_weight: f64,
    pub collision_weight: f64,
    pub effort_weight: f64,
    /// Clearance below which the collision hinge activates, meters.
    pub clearance: f64,
}

impl Default for MpcParams {
    fn default() -> Self {
        Self {
            horizon: 10,
            sample_count: 32,
            goal_weight: 1.0,
            collision_weight: 10.0,
            effort_weight: 0.01,
            clearance: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub episode_length: usize,
    pub ped_count_min: usize,
    pub ped_count_max: usize,
    pub arena: Arena,
    pub hsfm: HsfmParams,
    pub sensor: SensorParams,
    pub robot: RobotParams,
    pub mpc: MpcParams,
    /// Seeds the random MPC candidate sequences.
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            episode_length: 200,
            ped_count_min: 1,
            ped_count_max: 15,
            arena: Arena::default(),
            hsfm: HsfmParams::default(),
            sensor: SensorParams::default(),
            robot: RobotParams::default(),
            mpc: MpcParams::default(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimConfigError> {
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(field, format!("must be positive, got {v}")))
            }
        };
        let non_negative = |field: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(invalid(field, format!("must be non-negative, got {v}")))
            }
        };
        positive("dt", self.dt)?;
        if self.episode_length < 2 {
            return Err(invalid("episode_length", "must be at least 2"));
        }
        if self.ped_count_min < 1 {
            return Err(invalid("ped_count_min", "must be at least 1"));
        }
        if self.ped_count_max > 15 || self.ped_count_max < self.ped_count_min {
            return Err(invalid(
                "ped_count_max",
                format!("must lie in [ped_count_min, 15], got {}", self.ped_count_max),
            ));
        }
        let a = &self.arena;
        if !(a.x_max - a.x_min > 4.0 && a.y_max - a.y_min > 4.0) {
            return Err(invalid("arena", "must be at least 4 m wide in each axis"));
        }
        let h = &self.hsfm;
        positive("hsfm.relaxation_time", h.relaxation_time)?;
        non_negative("hsfm.repulsion_strength", h.repulsion_strength)?;
        positive("hsfm.repulsion_range", h.repulsion_range)?;
        positive("hsfm.body_radius", h.body_radius)?;
        positive("hsfm.heading_gain", h.heading_gain)?;
        if !(0.0..=1.0).contains(&h.lateral_attenuation) {
            return Err(invalid("hsfm.lateral_attenuation", "must lie in [0, 1]"));
        }
        positive("hsfm.desired_speed_min", h.desired_speed_min)?;
        if h.desired_speed_max < h.desired_speed_min {
            return Err(invalid("hsfm.desired_speed_max", "must be >= desired_speed_min"));
        }
        if !(h.max_speed_factor >= 1.0 && h.max_speed_factor <= 2.0) {
            return Err(invalid("hsfm.max_speed_factor", "must lie in [1, 2]"));
        }
        positive("hsfm.goal_tolerance", h.goal_tolerance)?;
        let s = &self.sensor;
        positive("sensor.fov_radius", s.fov_radius)?;
        non_negative("sensor.sigma_range", s.sigma_range)?;
        non_negative("sensor.sigma_bearing", s.sigma_bearing)?;
        non_negative("sensor.sigma_v", s.sigma_v)?;
        non_negative("sensor.sigma_omega", s.sigma_omega)?;
        positive("robot.v_max", self.robot.v_max)?;
        positive("robot.omega_max", self.robot.omega_max)?;
        positive("robot.goal_tolerance", self.robot.goal_tolerance)?;
        if self.mpc.horizon == 0 {
            return Err(invalid("mpc.horizon", "must be at least 1"));
        }
        non_negative("mpc.goal_weight", self.mpc.goal_weight)?;
        non_negative("mpc.collision_weight", self.mpc.collision_weight)?;
        non_negative("mpc.effort_weight", self.mpc.effort_weight)?;
        non_negative("mpc.clearance", self.mpc.clearance)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedestrianState {
    pub id: u32,
    pub position: Point2,
    /// m/s
    pub velocity: Vector2<f64>,
    pub heading: f64,
    pub goal: Point2,
    pub desired_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub time_step: usize,
    pub robot: Pose2,
    /// Control applied on the transition into `time_step`.
    pub robot_control: Control,
    pub robot_goal: Point2,
    pub pedestrians: Vec<PedestrianState>,
    pub arena: Arena,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryMeasurement {
    pub step: usize,
    pub u_meas: Control,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub step: usize,
    pub ped_id: u32,
    pub z: RangeBearing,
}

const GOAL_MARGIN: f64 = 1.0;

/// Draws the initial world: robot, its goal and a uniform crowd of
/// `[ped_count_min, ped_count_max]` pedestrians at rest.
pub fn initial_world(config: &SimConfig, rng: &mut Rng) -> WorldState {
    let arena = config.arena;
    let robot_pos = arena.sample(GOAL_MARGIN, rng);
    let robot = Pose2::new(
        robot_pos.x,
        robot_pos.y,
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    );
    let robot_goal = arena.sample(GOAL_MARGIN, rng);
    let count = rng.random_range(config.ped_count_min..=config.ped_count_max);
    let min_sep = 2.0 * config.hsfm.body_radius + 0.2;
    let mut pedestrians: Vec<PedestrianState> = Vec::with_capacity(count);
    let mut attempts = 0;
    while pedestrians.len() < count {
        let p = arena.sample(0.5, rng);
        attempts += 1;
        let clear = p.distance(&robot_pos) > 1.0
            && pedestrians.iter().all(|o| o.position.distance(&p) > min_sep);
        if !clear && attempts < 10_000 {
            continue;
        }
        let goal = arena.sample(GOAL_MARGIN, rng);
        let desired_speed =
            rng.random_range(config.hsfm.desired_speed_min..=config.hsfm.desired_speed_max);
        pedestrians.push(PedestrianState {
            id: pedestrians.len() as u32,
            position: p,
            velocity: Vector2::zeros(),
            heading: (goal.y - p.y).atan2(goal.x - p.x),
            goal,
            desired_speed,
        });
    }
    WorldState {
        time_step: 0,
        robot,
        robot_control: Control::default(),
        robot_goal,
        pedestrians,
        arena,
    }
}

/// Advances the world by one `dt`: pedestrians under HSFM, robot under MPC.
pub fn step_world(world: &WorldState, config: &SimConfig, rng: &mut Rng) -> WorldState {
    let dt = config.dt;
    let h = &config.hsfm;
    let mut pedestrians = Vec::with_capacity(world.pedestrians.len());
    for (k, ped) in world.pedestrians.iter().enumerate() {
        let others = world
            .pedestrians
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .map(|(_, p)| p);
        let force = hsfm_force(ped, others, &world.robot, h);
        let mut velocity = ped.velocity + force * dt;
        let max_speed = h.max_speed_factor * ped.desired_speed;
        let speed = velocity.norm();
        if speed > max_speed {
            velocity *= max_speed / speed;
        }
        let position = ped.position.offset(velocity.x * dt, velocity.y * dt);
        let mut heading = ped.heading;
        if velocity.norm() > 1e-6 {
            let target = velocity.y.atan2(velocity.x);
            let gain = (h.heading_gain * dt).min(1.0);
            heading = normalize_angle(heading + gain * normalize_angle(target - heading));
        }
        let mut goal = ped.goal;
        if position.distance(&goal) < h.goal_tolerance {
            goal = world.arena.sample(GOAL_MARGIN, rng);
        }
        pedestrians.push(PedestrianState {
            id: ped.id,
            position,
            velocity,
            heading,
            goal,
            desired_speed: ped.desired_speed,
        });
    }

    let control = mpc_control(world, &world.robot_goal, config);
    let robot = motion_model(&world.robot, &control, dt).expect("validated dt and bounded control");
    let mut robot_goal = world.robot_goal;
    if robot.position().distance(&robot_goal) < config.robot.goal_tolerance {
        robot_goal = world.arena.sample(GOAL_MARGIN, rng);
    }

    WorldState {
        time_step: world.time_step + 1,
        robot,
        robot_control: control,
        robot_goal,
        pedestrians,
        arena: world.arena,
    }
}

fn gaussian(sigma: f64, rng: &mut Rng) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("sigma validated").sample(rng)
}

/// Noisy odometry for the control applied into `world.time_step`, plus one
/// range-bearing reading per pedestrian inside the sensing radius.
pub fn sense(
    world: &WorldState,
    config: &SimConfig,
    rng: &mut Rng,
) -> (OdometryMeasurement, Vec<Observation>) {
    let s = &config.sensor;
    let u = world.robot_control;
    let odometry = OdometryMeasurement {
        step: world.time_step,
        u_meas: Control::new(u.v + gaussian(s.sigma_v, rng), u.omega + gaussian(s.sigma_omega, rng)),
    };
    let mut observations = Vec::new();
    for ped in &world.pedestrians {
        let Ok(z) = observation_model(&world.robot, &ped.position) else {
            continue;
        };
        if z.range > s.fov_radius {
            continue;
        }
        let range = (z.range + gaussian(s.sigma_range, rng)).max(0.0);
        let bearing = z.bearing + gaussian(s.sigma_bearing, rng);
        observations.push(Observation {
            step: world.time_step,
            ped_id: ped.id,
            z: RangeBearing::new(range, bearing),
        });
    }
    (odometry, observations)
}

fn snapshot(world: &WorldState, odometry: Option<OdometryMeasurement>, observations: Vec<Observation>) -> StepRecord {
    StepRecord {
        step: world.time_step,
        robot: world.robot,
        pedestrians: world.pedestrians.clone(),
        control: world.robot_control,
        odometry,
        observations,
    }
}

/// Rolls one episode of `config.episode_length` recorded steps.
pub fn run_episode(config: &SimConfig, seed: u64) -> EpisodeRecord {
    let mut rng = rng::stream(seed, &[]);
    let mut world = initial_world(config, &mut rng);
    let mut steps = Vec::with_capacity(config.episode_length);
    let (_, observations) = sense(&world, config, &mut rng);
    steps.push(snapshot(&world, None, observations));
    for _ in 1..config.episode_length {
        world = step_world(&world, config, &mut rng);
        let (odometry, observations) = sense(&world, config, &mut rng);
        steps.push(snapshot(&world, Some(odometry), observations));
    }
    EpisodeRecord {
        config: config.clone(),
        seed,
        steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ped(id: u32, x: f64, y: f64, goal: Point2) -> PedestrianState {
        PedestrianState {
            id,
            position: Point2::new(x, y),
            velocity: Vector2::zeros(),
            heading: (goal.y - y).atan2(goal.x - x),
            goal,
            desired_speed: 1.2,
        }
    }

    fn far_robot() -> Pose2 {
        Pose2::new(100.0, 100.0, 0.0)
    }

    fn world_with(peds: Vec<PedestrianState>) -> WorldState {
        WorldState {
            time_step: 0,
            robot: far_robot(),
            robot_control: Control::default(),
            robot_goal: Point2::new(100.0, 100.0),
            pedestrians: peds,
            arena: Arena {
                x_min: -200.0,
                x_max: 200.0,
                y_min: -200.0,
                y_max: 200.0,
            },
        }
    }

    #[test]
    fn default_config_is_valid() {
        SimConfig::default().validate().unwrap();
    }

    #[test]
    fn validation_names_field() {
        let mut c = SimConfig::default();
        c.ped_count_min = 0;
        assert_eq!(c.validate().unwrap_err().field, "ped_count_min");
        let mut c = SimConfig::default();
        c.sensor.sigma_range = -1.0;
        assert_eq!(c.validate().unwrap_err().field, "sensor.sigma_range");
    }

    #[test]
    fn zero_force_moves_linearly() {
        let mut config = SimConfig::default();
        config.hsfm.repulsion_strength = 0.0;
        let mut p = ped(0, 0.0, 0.0, Point2::new(50.0, 0.0));
        p.velocity = Vector2::new(1.2, 0.0);
        p.heading = 0.0;
        let world = world_with(vec![p]);
        let mut rng = rng::stream(1, &[]);
        let next = step_world(&world, &config, &mut rng);
        let q = &next.pedestrians[0];
        assert!((q.position.x - 0.12).abs() < 1e-15);
        assert_eq!(q.position.y, 0.0);
        assert_eq!(next.time_step, 1);
    }

    #[test]
    fn step_is_deterministic() {
        let config = SimConfig::default();
        let world = initial_world(&config, &mut rng::stream(3, &[]));
        let a = step_world(&world, &config, &mut rng::stream(9, &[]));
        let b = step_world(&world, &config, &mut rng::stream(9, &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn unobstructed_arrival_time_matches_desired_speed() {
        let config = SimConfig::default();
        let goal = Point2::new(10.0, 0.0);
        let mut world = world_with(vec![ped(0, 0.0, 0.0, goal)]);
        let speed = world.pedestrians[0].desired_speed;
        let mut rng = rng::stream(5, &[]);
        let mut arrival = None;
        for i in 1..400 {
            world = step_world(&world, &config, &mut rng);
            if world.pedestrians[0].goal != goal {
                arrival = Some(i as f64 * config.dt);
                break;
            }
        }
        let t = arrival.expect("pedestrian never reached its goal");
        let expected = 10.0 / speed;
        assert!((t - expected).abs() / expected < 0.15, "t={t} expected={expected}");
    }

    #[test]
    fn head_on_pair_curves_around() {
        let config = SimConfig::default();
        let mut world = world_with(vec![
            ped(0, -5.0, 0.05, Point2::new(5.0, 0.05)),
            ped(1, 5.0, -0.05, Point2::new(-5.0, -0.05)),
        ]);
        let mut rng = rng::stream(5, &[]);
        let mut max_dev = 0.0f64;
        for _ in 0..150 {
            world = step_world(&world, &config, &mut rng);
            max_dev = max_dev.max((world.pedestrians[0].position.y - 0.05).abs());
        }
        assert!(max_dev > config.hsfm.body_radius, "max lateral deviation {max_dev}");
    }

    #[test]
    fn noiseless_sensing_is_exact() {
        let mut config = SimConfig::default();
        config.sensor = config.sensor.noiseless();
        let mut world = world_with(vec![ped(0, 103.0, 101.0, Point2::new(0.0, 0.0))]);
        world.robot_control = Control::new(0.7, -0.2);
        let (odo, obs) = sense(&world, &config, &mut rng::stream(0, &[]));
        assert_eq!(odo.u_meas, world.robot_control);
        assert_eq!(obs.len(), 1);
        let exact = observation_model(&world.robot, &world.pedestrians[0].position).unwrap();
        assert_eq!(obs[0].z, exact);
    }

    #[test]
    fn visibility_boundary() {
        let config = SimConfig::default();
        let r = config.sensor.fov_radius;
        let mut noiseless = config.clone();
        noiseless.sensor = noiseless.sensor.noiseless();
        let inside = world_with(vec![ped(0, 100.0 + r - 1e-9, 100.0, Point2::new(0.0, 0.0))]);
        let outside = world_with(vec![ped(0, 100.0 + r + 1e-9, 100.0, Point2::new(0.0, 0.0))]);
        let mut rng = rng::stream(0, &[]);
        assert_eq!(sense(&inside, &noiseless, &mut rng).1.len(), 1);
        assert!(sense(&outside, &noiseless, &mut rng).1.is_empty());
    }

    #[test]
    fn range_noise_statistics() {
        let config = SimConfig::default();
        let world = world_with(vec![ped(0, 102.0, 100.0, Point2::new(0.0, 0.0))]);
        let mut rng = rng::stream(11, &[]);
        let n = 100_000;
        let errs: Vec<f64> = (0..n)
            .map(|_| sense(&world, &config, &mut rng).1[0].z.range - 2.0)
            .collect();
        let mean = errs.iter().sum::<f64>() / n as f64;
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let rel = (var.sqrt() - config.sensor.sigma_range).abs() / config.sensor.sigma_range;
        assert!(rel < 0.03, "relative std error {rel}");
    }

    #[test]
    fn episode_shape_and_determinism() {
        let mut config = SimConfig::default();
        config.episode_length = 40;
        let a = run_episode(&config, 17);
        let b = run_episode(&config, 17);
        assert_eq!(a, b);
        assert_eq!(a.steps.len(), 40);
        assert!(a.steps[0].odometry.is_none());
        assert!(a.steps[1..].iter().all(|s| s.odometry.is_some()));
        let n = a.steps[0].pedestrians.len();
        assert!((1..=15).contains(&n));
        assert!(a.steps.iter().all(|s| s.pedestrians.len() == n));
    }

    #[test]
    fn no_teleports_and_robot_stays_in_arena() {
        let config = SimConfig::default();
        for seed in 0..4 {
            let ep = run_episode(&config, seed);
            for w in ep.steps.windows(2) {
                assert!(config.arena.contains(&w[1].robot.position()));
                for (a, b) in w[0].pedestrians.iter().zip(&w[1].pedestrians) {
                    let d = a.position.distance(&b.position);
                    assert!(d <= 2.0 * a.desired_speed * config.dt + 1e-12);
                    assert!(b.velocity.norm() <= 2.0 * b.desired_speed);
                }
            }
        }
    }
}

use rand::Rng as _;

use super::{SimConfig, WorldState};
use crate::geometry::{motion_model, Control, Point2, Pose2};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutCost {
    pub total: f64,
    pub goal: f64,
    pub collision: f64,
    pub effort: f64,
    /// Smallest robot-pedestrian distance along the rollout (infinite when alone).
    pub min_clearance: f64,
}

/// Candidate control sequences, each held constant over the horizon: a fixed
/// `(v, omega)` lattice followed by `sample_count` uniform draws seeded from
/// `(config.seed, world.time_step)`.
pub fn mpc_candidates(world: &WorldState, config: &SimConfig) -> Vec<Control> {
    let r = &config.robot;
    let mut out = Vec::with_capacity(45 + config.mpc.sample_count);
    for i in 0..5 {
        let v = r.v_max * i as f64 / 4.0;
        for j in 0..9 {
            let omega = r.omega_max * (j as f64 - 4.0) / 4.0;
            out.push(Control::new(v, omega));
        }
    }
    let mut rng = rng::stream(config.seed, &[world.time_step as u64, 0x006d_7063]);
    for _ in 0..config.mpc.sample_count {
        out.push(Control::new(
            rng.random_range(0.0..=r.v_max),
            rng.random_range(-r.omega_max..=r.omega_max),
        ));
    }
    out
}

pub fn rollout_robot(start: &Pose2, u: &Control, horizon: usize, dt: f64) -> Vec<Pose2> {
    let mut poses = Vec::with_capacity(horizon);
    let mut pose = *start;
    for _ in 0..horizon {
        pose = motion_model(&pose, u, dt).expect("dt validated");
        poses.push(pose);
    }
    poses
}

/// Cost of holding `u` over the horizon with pedestrians extrapolated at
/// constant velocity.
pub fn rollout_cost(world: &WorldState, goal: &Point2, u: &Control, config: &SimConfig) -> RolloutCost {
    let m = &config.mpc;
    let dt = config.dt;
    let poses = rollout_robot(&world.robot, u, m.horizon, dt);
    let mut collision = 0.0;
    let mut min_clearance = f64::INFINITY;
    let a = &world.arena;
    for (k, pose) in poses.iter().enumerate() {
        let t = (k + 1) as f64 * dt;
        for ped in &world.pedestrians {
            let p = ped.position.offset(ped.velocity.x * t, ped.velocity.y * t);
            let d = p.distance(&pose.position());
            min_clearance = min_clearance.min(d);
            collision += (m.clearance - d).max(0.0);
        }
        let outside = (a.x_min - pose.x()).max(0.0)
            + (pose.x() - a.x_max).max(0.0)
            + (a.y_min - pose.y()).max(0.0)
            + (pose.y() - a.y_max).max(0.0);
        collision += outside;
    }
    let terminal = poses.last().copied().unwrap_or(world.robot);
    let goal_cost = m.goal_weight * terminal.position().distance(goal);
    let collision = m.collision_weight * collision;
    let effort = m.effort_weight * (u.v * u.v + u.omega * u.omega) * dt * m.horizon as f64;
    RolloutCost {
        total: goal_cost + collision + effort,
        goal: goal_cost,
        collision,
        effort,
        min_clearance,
    }
}

/// Sampling MPC: the first control of the cheapest candidate sequence.
/// Candidates whose first step leaves the arena are discarded; the `v = 0`
/// lattice row is always admissible.
pub fn mpc_control(world: &WorldState, goal: &Point2, config: &SimConfig) -> Control {
    let mut best = Control::default();
    let mut best_cost = f64::INFINITY;
    let inside = world.arena.contains(&world.robot.position());
    for u in mpc_candidates(world, config) {
        if inside {
            let u_c = u.clamped(config.robot.v_max, config.robot.omega_max);
            let next = motion_model(&world.robot, &u_c, config.dt).expect("dt validated");
            if !world.arena.contains(&next.position()) {
                continue;
            }
        }
        let c = rollout_cost(world, goal, &u, config).total;
        if c < best_cost {
            best_cost = c;
            best = u;
        }
    }
    best.clamped(config.robot.v_max, config.robot.omega_max)
}

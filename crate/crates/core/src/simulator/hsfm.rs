use nalgebra::Vector2;

use super::{HsfmParams, PedestrianState};
use crate::geometry::Pose2;

fn repulsion(from: Vector2<f64>, towards: Vector2<f64>, fallback: Vector2<f64>, p: &HsfmParams) -> Vector2<f64> {
    let diff = towards - from;
    let d = diff.norm();
    let (d, n) = if d > 1e-12 {
        (d, diff / d)
    } else {
        (2.0 * p.body_radius, fallback)
    };
    n * (p.repulsion_strength * ((2.0 * p.body_radius - d) / p.repulsion_range).exp())
}

/// Social force on `ped` (unit mass): goal attraction, exponential repulsion
/// from every other pedestrian and from the robot, with the component
/// orthogonal to the pedestrian's heading scaled by `lateral_attenuation`.
pub fn hsfm_force<'a>(
    ped: &PedestrianState,
    others: impl IntoIterator<Item = &'a PedestrianState>,
    robot: &Pose2,
    params: &HsfmParams,
) -> Vector2<f64> {
    let pos = ped.position.vector();
    let to_goal = ped.goal.vector() - pos;
    let dist = to_goal.norm();
    let goal_dir = if dist > 1e-9 { to_goal / dist } else { Vector2::zeros() };
    let mut force = (goal_dir * ped.desired_speed - ped.velocity) / params.relaxation_time;

    for other in others {
        // coincident agents separate along x, ordered by id
        let fallback = if ped.id < other.id { Vector2::new(-1.0, 0.0) } else { Vector2::new(1.0, 0.0) };
        force += repulsion(other.position.vector(), pos, fallback, params);
    }
    force += repulsion(robot.position().vector(), pos, Vector2::new(1.0, 0.0), params);

    let heading = Vector2::new(ped.heading.cos(), ped.heading.sin());
    let forward = heading * force.dot(&heading);
    forward + (force - forward) * params.lateral_attenuation
}

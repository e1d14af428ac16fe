//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use crowdslam::dataset::{EpisodeRecord, StepRecord};
use crowdslam::geometry::{motion_jacobian, motion_model, normalize_angle, observation_jacobians, observation_model};
use crowdslam::neuralnet::{gat_loss_grad, gat_predict, history_features, GatWeights};
use crowdslam::rng;
use crowdslam::simulator::{Observation, OdometryMeasurement, PedestrianState, SimConfig};
use crowdslam::{Control, Point2, Pose2};
use nalgebra::Vector2;
use rand::Rng as _;

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

pub fn central_diff(params: &[f64], h: f64, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let x = p[i];
            p[i] = x + h;
            let up = f(&p);
            p[i] = x - h;
            let down = f(&p);
            p[i] = x;
            up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * h)).collect()
        })
        .collect()
}

/// Relative Frobenius error of the motion Jacobian at a random state.
pub fn motion_fd_error(r: &mut rng::Rng) -> f64 {
    let pose = Pose2::new(r.random_range(-10.0..10.0), r.random_range(-10.0..10.0), r.random_range(-3.1..3.1));
    let u = Control::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
    let dt = r.random_range(0.01..0.5);
    let j = motion_jacobian(&pose, &u, dt).unwrap();
    let theta0 = motion_model(&pose, &u, dt).unwrap().theta();
    let cols = central_diff(&[pose.x(), pose.y(), pose.theta()], 1e-6, |p| {
        let out = motion_model(&Pose2::new(p[0], p[1], p[2]), &u, dt).unwrap();
        vec![out.x(), out.y(), normalize_angle(out.theta() - theta0)]
    });
    let analytic: Vec<f64> = (0..3).flat_map(|c| (0..3).map(move |r| (r, c))).map(|(r, c)| j[(r, c)]).collect();
    rel_err(&analytic, &cols.concat())
}

/// Relative Frobenius error of both observation Jacobians at a random state.
pub fn observation_fd_error(r: &mut rng::Rng) -> f64 {
    let pose = Pose2::new(r.random_range(-10.0..10.0), r.random_range(-10.0..10.0), r.random_range(-3.1..3.1));
    let range = r.random_range(0.3..8.0);
    let ang: f64 = r.random_range(-3.1..3.1);
    let lm = Point2::new(pose.x() + range * ang.cos(), pose.y() + range * ang.sin());
    let (jp, jm) = observation_jacobians(&pose, &lm).unwrap();
    let z0 = observation_model(&pose, &lm).unwrap();
    // Bearing differences are taken relative to z0 so wrapping never splits them.
    let eval = |pose: &Pose2, lm: &Point2| {
        let z = observation_model(pose, lm).unwrap();
        vec![z.range, normalize_angle(z.bearing - z0.bearing)]
    };
    let cols_p = central_diff(&[pose.x(), pose.y(), pose.theta()], 1e-6, |p| {
        eval(&Pose2::new(p[0], p[1], p[2]), &lm)
    });
    let cols_m = central_diff(&[lm.x, lm.y], 1e-6, |p| eval(&pose, &Point2::new(p[0], p[1])));
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for c in 0..3 {
        for row in 0..2 {
            analytic.push(jp[(row, c)]);
            numeric.push(cols_p[c][row]);
        }
    }
    for c in 0..2 {
        for row in 0..2 {
            analytic.push(jm[(row, c)]);
            numeric.push(cols_m[c][row]);
        }
    }
    rel_err(&analytic, &numeric)
}

pub fn random_scene(r: &mut rng::Rng, n: usize, h: usize) -> (Vec<Vec<Point2>>, Vec<Point2>) {
    let histories: Vec<Vec<Point2>> = (0..n)
        .map(|_| {
            let mut p = Point2::new(r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
            let mut out = vec![p];
            for _ in 1..h {
                p = p.offset(r.random_range(-0.15..0.15), r.random_range(-0.15..0.15));
                out.push(p);
            }
            out
        })
        .collect();
    let positions = histories.iter().map(|h| *h.last().unwrap()).collect();
    (histories, positions)
}

/// Analytic GAT training gradient against central differences of the
/// plain forward pass on a random scene of 1-6 agents.
pub fn gat_fd_error(case: u64) -> f64 {
    let mut r = rng::stream(200, &[case]);
    let h = r.random_range(3..7);
    let w = GatWeights::init(h, 6, &[8], &[7, 5], 10.0, &mut r);
    let n = r.random_range(1..7);
    let radius = r.random_range(1.0..5.0);
    let (histories, positions) = random_scene(&mut r, n, h);
    let features: Vec<Vec<f64>> = histories.iter().map(|h| history_features(h, 1.0)).collect();
    let targets: Vec<Option<[f64; 2]>> = (0..n)
        .map(|k| (k != 1).then(|| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]))
        .collect();
    let norm = 2.0 * n as f64;
    let mut grad = vec![0.0; w.param_count()];
    gat_loss_grad(&w, &features, &positions, radius, &targets, norm, &mut grad);
    let mut params = Vec::new();
    w.write_params(&mut params);
    let fd = central_diff(&params, 1e-6, |p| {
        let mut v = w.clone();
        v.read_params(p);
        let pred = gat_predict(&histories, &positions, radius, &v).unwrap();
        let mut sse = 0.0;
        for (y, t) in pred.iter().zip(&targets) {
            if let Some(t) = t {
                sse += (y[0] - t[0]).powi(2) + (y[1] - t[1]).powi(2);
            }
        }
        vec![sse / norm]
    });
    rel_err(&grad, &fd.concat())
}

/// Robot on a gentle arc, pedestrians at constant velocity, exact sensing.
pub fn synthetic_episode(
    steps: usize,
    peds: &[(Point2, Vector2<f64>)],
    observed: impl Fn(u32, usize) -> bool,
) -> EpisodeRecord {
    let mut config = SimConfig::default();
    config.sensor = config.sensor.noiseless();
    let dt = config.dt;
    let u = Control::new(0.5, 0.1);
    let mut robot = Pose2::new(0.0, 0.0, 0.0);
    let mut out = Vec::new();
    for i in 0..steps {
        if i > 0 {
            robot = motion_model(&robot, &u, dt).unwrap();
        }
        let pedestrians: Vec<PedestrianState> = peds
            .iter()
            .enumerate()
            .map(|(k, (p0, v))| PedestrianState {
                id: k as u32,
                position: p0.offset(v.x * dt * i as f64, v.y * dt * i as f64),
                velocity: *v,
                heading: v.y.atan2(v.x),
                goal: Point2::new(100.0, 100.0),
                desired_speed: v.norm(),
            })
            .collect();
        let observations = pedestrians
            .iter()
            .filter(|p| observed(p.id, i))
            .map(|p| Observation {
                step: i,
                ped_id: p.id,
                z: observation_model(&robot, &p.position).unwrap(),
            })
            .collect();
        out.push(StepRecord {
            step: i,
            robot,
            pedestrians,
            control: if i == 0 { Control::default() } else { u },
            odometry: (i > 0).then_some(OdometryMeasurement { step: i, u_meas: u }),
            observations,
        });
    }
    EpisodeRecord {
        config,
        seed: 0,
        steps: out,
    }
}

pub fn crowd() -> Vec<(Point2, Vector2<f64>)> {
    vec![
        (Point2::new(2.0, 1.0), Vector2::new(-0.8, 0.1)),
        (Point2::new(1.0, -2.0), Vector2::new(0.3, 0.9)),
        (Point2::new(3.0, 3.0), Vector2::new(0.0, -1.1)),
    ]
}

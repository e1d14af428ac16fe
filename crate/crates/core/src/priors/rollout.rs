use nalgebra::{Matrix2, Vector2};
use rand_distr::{Distribution, StandardNormal};

use super::{HistoryBuffer, PedForecast, PriorConfig, PriorError, PriorKind, RolloutSet, RolloutStats, StochasticParams};
use crate::geometry::{Cov2, Point2};
use crate::neuralnet::{gat_predict, history_features, GatWeights, MlpWeights};
use crate::rng::{self, Rng};

fn require(h: &HistoryBuffer, need: usize) -> Result<(), PriorError> {
    if h.len() < need {
        return Err(PriorError::InsufficientHistory {
            ped_id: h.ped_id,
            have: h.len(),
            need,
        });
    }
    Ok(())
}

fn step_point(p: &Point2, v: &Vector2<f64>, dt: f64) -> Point2 {
    Point2::new(p.x + v.x * dt, p.y + v.y * dt)
}

/// Next-step velocity from the newest `H` positions of `history`.
pub fn mlp_predict(history: &HistoryBuffer, w: &MlpWeights) -> Result<Vector2<f64>, PriorError> {
    let need = w.input_dim() / 2 + 1;
    require(history, need)?;
    let y = w.forward(&history_features(history.tail(need), 1.0));
    Ok(Vector2::new(y[0], y[1]))
}

/// Autoregressive single-agent rollout: velocities and positions.
pub fn mlp_rollout(
    history: &HistoryBuffer,
    w: &MlpWeights,
    horizon: usize,
    dt: f64,
) -> Result<(Vec<Vector2<f64>>, Vec<Point2>), PriorError> {
    let need = w.input_dim() / 2 + 1;
    require(history, need)?;
    let mut window: Vec<Point2> = history.tail(need).to_vec();
    let mut vs = Vec::with_capacity(horizon);
    let mut ps = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let y = w.forward(&history_features(&window, 1.0));
        let v = Vector2::new(y[0], y[1]);
        let p = step_point(&window[need - 1], &v, dt);
        window.remove(0);
        window.push(p);
        vs.push(v);
        ps.push(p);
    }
    Ok((vs, ps))
}

fn check_scene(scene: &[HistoryBuffer], need: usize) -> Result<(), PriorError> {
    let first = scene.first().ok_or(PriorError::EmptyScene)?;
    for h in scene {
        require(h, need)?;
        if h.last_step != first.last_step {
            return Err(PriorError::NotCoTemporal);
        }
    }
    Ok(())
}

struct Joint {
    positions: Vec<Vec<Point2>>,
    velocities: Vec<Vec<Vector2<f64>>>,
}

/// Rolls the whole scene forward. `first` holds the noise-free step-0
/// velocities; `noise` carries one generator per agent and the std.
fn joint_rollout(
    w: &GatWeights,
    radius: f64,
    start: &[Vec<Point2>],
    first: &[Vector2<f64>],
    horizon: usize,
    dt: f64,
    mut noise: Option<(&mut [Rng], f64)>,
) -> Result<Joint, PriorError> {
    let n = start.len();
    let mut hist: Vec<Vec<Point2>> = start.to_vec();
    let mut positions = vec![Vec::with_capacity(horizon); n];
    let mut velocities = vec![Vec::with_capacity(horizon); n];
    for t in 0..horizon {
        let vhat: Vec<Vector2<f64>> = if t == 0 {
            first.to_vec()
        } else {
            let now: Vec<Point2> = hist.iter().map(|h| h[h.len() - 1]).collect();
            gat_predict(&hist, &now, radius, w)?
                .into_iter()
                .map(|v| Vector2::new(v[0], v[1]))
                .collect()
        };
        for k in 0..n {
            let mut v = vhat[k];
            if let Some((rngs, sigma)) = noise.as_mut() {
                let ex: f64 = StandardNormal.sample(&mut rngs[k]);
                let ey: f64 = StandardNormal.sample(&mut rngs[k]);
                v += Vector2::new(*sigma * ex, *sigma * ey);
            }
            let h = &mut hist[k];
            let p = step_point(&h[h.len() - 1], &v, dt);
            h.remove(0);
            h.push(p);
            positions[k].push(p);
            velocities[k].push(v);
        }
    }
    Ok(Joint { positions, velocities })
}

fn scene_start(scene: &[HistoryBuffer], h: usize) -> (Vec<Vec<Point2>>, Vec<Point2>) {
    let start: Vec<Vec<Point2>> = scene.iter().map(|b| b.tail(h).to_vec()).collect();
    let now = scene.iter().map(HistoryBuffer::last).collect();
    (start, now)
}

fn first_velocities(
    w: &GatWeights,
    radius: f64,
    start: &[Vec<Point2>],
    now: &[Point2],
) -> Result<Vec<Vector2<f64>>, PriorError> {
    Ok(gat_predict(start, now, radius, w)?
        .into_iter()
        .map(|v| Vector2::new(v[0], v[1]))
        .collect())
}

/// Joint autoregressive rollout; attention is recomputed at every step.
/// Returns `T` future positions per pedestrian, in scene order.
pub fn gat_rollout_deterministic(
    scene: &[HistoryBuffer],
    w: &GatWeights,
    radius: f64,
    horizon: usize,
    dt: f64,
) -> Result<Vec<Vec<Point2>>, PriorError> {
    Ok(gat_joint_deterministic(scene, w, radius, horizon, dt)?.positions)
}

fn gat_joint_deterministic(
    scene: &[HistoryBuffer],
    w: &GatWeights,
    radius: f64,
    horizon: usize,
    dt: f64,
) -> Result<Joint, PriorError> {
    let h = w.history_len();
    check_scene(scene, h)?;
    let (start, now) = scene_start(scene, h);
    let first = if horizon > 0 {
        first_velocities(w, radius, &start, &now)?
    } else {
        Vec::new()
    };
    joint_rollout(w, radius, &start, &first, horizon, dt, None)
}

/// `N` perturbed joint rollouts. Sample `s` perturbs every velocity of agent
/// `k` with a stream derived from `(seed, last_step, ped_id, s)`.
pub fn gat_rollout_stochastic(
    scene: &[HistoryBuffer],
    w: &GatWeights,
    radius: f64,
    horizon: usize,
    dt: f64,
    params: &StochasticParams,
) -> Result<Vec<RolloutSet>, PriorError> {
    params.validate()?;
    let h = w.history_len();
    check_scene(scene, h)?;
    let (start, now) = scene_start(scene, h);
    let first = if horizon > 0 {
        first_velocities(w, radius, &start, &now)?
    } else {
        Vec::new()
    };
    let step = scene[0].last_step as u64;
    let mut sets: Vec<RolloutSet> = scene
        .iter()
        .map(|b| RolloutSet {
            ped_id: b.ped_id,
            origin: b.last(),
            positions: Vec::with_capacity(params.samples),
            velocities: Vec::with_capacity(params.samples),
        })
        .collect();
    for s in 0..params.samples {
        let joint = if params.sigma > 0.0 {
            let mut rngs: Vec<Rng> = scene
                .iter()
                .map(|b| rng::stream(params.seed, &[step, b.ped_id as u64, s as u64]))
                .collect();
            joint_rollout(w, radius, &start, &first, horizon, dt, Some((&mut rngs, params.sigma)))?
        } else {
            joint_rollout(w, radius, &start, &first, horizon, dt, None)?
        };
        for (set, (p, v)) in sets.iter_mut().zip(joint.positions.into_iter().zip(joint.velocities)) {
            set.positions.push(p);
            set.velocities.push(v);
        }
    }
    Ok(sets)
}

/// Per-step sample mean and unbiased covariance (plus `eps_reg I`) of the
/// rollout velocities. The mean is accumulated as an offset from the first
/// sample so identical samples reproduce it exactly.
pub fn empirical_stats(rollouts: &RolloutSet, eps_reg: f64) -> Result<RolloutStats, PriorError> {
    let n = rollouts.samples();
    if n < 2 {
        return Err(PriorError::TooFewSamples(n));
    }
    let horizon = rollouts.horizon();
    let mut mean = Vec::with_capacity(horizon);
    let mut cov = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let v0 = rollouts.velocities[0][t];
        let shift: Vector2<f64> = rollouts.velocities.iter().map(|v| v[t] - v0).sum();
        let mu = v0 + shift / n as f64;
        let mut c = Matrix2::zeros();
        for v in &rollouts.velocities {
            let d = v[t] - mu;
            c += d * d.transpose();
        }
        c /= (n - 1) as f64;
        c[(0, 1)] = 0.5 * (c[(0, 1)] + c[(1, 0)]);
        c[(1, 0)] = c[(0, 1)];
        c += Matrix2::identity() * eps_reg;
        mean.push(mu);
        cov.push(Cov2::new(c).map_err(|e| PriorError::Invalid {
            field: "rollout covariance",
            message: e.to_string(),
        })?);
    }
    Ok(RolloutStats {
        ped_id: rollouts.ped_id,
        mean,
        cov,
    })
}

/// Horizon forecasts for every pedestrian of `scene` with enough history.
/// GAT kinds roll all eligible pedestrians jointly.
pub fn forecast(
    kind: &PriorKind,
    config: &PriorConfig,
    scene: &[HistoryBuffer],
    horizon: usize,
    dt: f64,
) -> Result<Vec<PedForecast>, PriorError> {
    kind.validate()?;
    let need = match kind.required_history() {
        Some(n) => n,
        None => return Ok(Vec::new()),
    };
    let eligible: Vec<HistoryBuffer> = scene.iter().filter(|h| h.len() >= need).cloned().collect();
    if eligible.is_empty() {
        return Ok(Vec::new());
    }
    match kind {
        PriorKind::NoPrior => Ok(Vec::new()),
        PriorKind::Cvm => Ok(eligible
            .iter()
            .map(|h| {
                let p = h.positions();
                let (a, b) = (p[p.len() - 2], p[p.len() - 1]);
                let d = Vector2::new(b.x - a.x, b.y - a.y);
                PedForecast {
                    ped_id: h.ped_id,
                    velocities: vec![d / dt; horizon],
                    positions: (1..=horizon)
                        .map(|k| Point2::new(b.x + d.x * k as f64, b.y + d.y * k as f64))
                        .collect(),
                    position_cov: None,
                    stats: None,
                }
            })
            .collect()),
        PriorKind::SingleAgentMlp(w) => eligible
            .iter()
            .map(|h| {
                let (velocities, positions) = mlp_rollout(h, w, horizon, dt)?;
                Ok(PedForecast {
                    ped_id: h.ped_id,
                    velocities,
                    positions,
                    position_cov: None,
                    stats: None,
                })
            })
            .collect(),
        PriorKind::DeterministicGat(w) => {
            let joint = gat_joint_deterministic(&eligible, w, config.radius, horizon, dt)?;
            Ok(eligible
                .iter()
                .zip(joint.positions.into_iter().zip(joint.velocities))
                .map(|(h, (positions, velocities))| PedForecast {
                    ped_id: h.ped_id,
                    velocities,
                    positions,
                    position_cov: None,
                    stats: None,
                })
                .collect())
        }
        PriorKind::StochasticGat(w, params) => {
            let sets = gat_rollout_stochastic(&eligible, w, config.radius, horizon, dt, params)?;
            sets.iter()
                .map(|set| {
                    let stats = empirical_stats(set, config.eps_reg)?;
                    let mut p = set.origin;
                    let mut acc = Matrix2::zeros();
                    let mut positions = Vec::with_capacity(horizon);
                    let mut covs = Vec::with_capacity(horizon);
                    for (mu, sigma) in stats.mean.iter().zip(&stats.cov) {
                        p = step_point(&p, mu, dt);
                        acc += sigma.matrix() * (dt * dt);
                        positions.push(p);
                        covs.push(Cov2::new(acc).map_err(|e| PriorError::Invalid {
                            field: "position covariance",
                            message: e.to_string(),
                        })?);
                    }
                    Ok(PedForecast {
                        ped_id: set.ped_id,
                        velocities: stats.mean.clone(),
                        positions,
                        position_cov: Some(covs),
                        stats: Some(stats),
                    })
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sample_stats() {
        let set = RolloutSet {
            ped_id: 0,
            origin: Point2::new(0.0, 0.0),
            positions: vec![vec![Point2::new(0.0, 0.0)], vec![Point2::new(0.2, 0.0)]],
            velocities: vec![vec![Vector2::new(0.0, 0.0)], vec![Vector2::new(2.0, 0.0)]],
        };
        let s = empirical_stats(&set, 1e-4).unwrap();
        assert_eq!(s.mean[0], Vector2::new(1.0, 0.0));
        let c = s.cov[0].matrix();
        assert!((c[(0, 0)] - (2.0 + 1e-4)).abs() < 1e-15 && c[(0, 1)] == 0.0 && c[(1, 1)] == 1e-4);
    }

    #[test]
    fn identical_samples_give_regulariser() {
        let v = Vector2::new(0.3, -0.7);
        let set = RolloutSet {
            ped_id: 0,
            origin: Point2::new(0.0, 0.0),
            positions: vec![vec![Point2::new(0.03, -0.07)]; 5],
            velocities: vec![vec![v]; 5],
        };
        let s = empirical_stats(&set, 1e-4).unwrap();
        assert_eq!(s.mean[0], v);
        assert_eq!(*s.cov[0].matrix(), Matrix2::identity() * 1e-4);
        let one = RolloutSet {
            velocities: vec![vec![v]],
            positions: vec![vec![Point2::new(0.0, 0.0)]],
            ..set
        };
        assert!(matches!(empirical_stats(&one, 1e-4), Err(PriorError::TooFewSamples(1))));
    }

    #[test]
    fn cvm_forecast_is_linear() {
        let h = HistoryBuffer::new(
            4,
            5,
            vec![Point2::new(0.0, 0.0), Point2::new(0.1, 0.05), Point2::new(0.2, 0.1)],
        )
        .unwrap();
        let f = forecast(&PriorKind::Cvm, &PriorConfig::default(), &[h], 3, 0.1).unwrap();
        assert_eq!(f.len(), 1);
        for (k, p) in f[0].positions.iter().enumerate() {
            let t = (k + 1) as f64;
            assert!((p.x - (0.2 + 0.1 * t)).abs() < 1e-12 && (p.y - (0.1 + 0.05 * t)).abs() < 1e-12);
        }
    }
}

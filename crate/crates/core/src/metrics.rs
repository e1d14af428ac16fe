//! Trajectory and forecast error metrics.
//!
//! RMS-type numbers are pooled: episodes contribute their squared-error
//! sums and counts, and the sums are accumulated exactly so pooling does not
//! depend on episode order.
//!
//! SDE (safety distance error) is this crate's own definition: the mean
//! absolute difference between the estimated and the true minimum
//! robot-pedestrian distance, over steps with at least one estimated
//! pedestrian.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EpisodeRecord;
use crate::geometry::{Point2, Pose2};
use crate::slam::SlamResult;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no overlapping samples for {0}")]
    Empty(&'static str),
    #[error("length mismatch: {estimated} estimates vs {truth} ground-truth steps")]
    Length { estimated: usize, truth: usize },
    #[error("pedestrian {ped_id} has no ground truth at step {step}")]
    MissingTruth { ped_id: u32, step: usize },
}

/// Correctly rounded floating-point sum (Shewchuk partials).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExactSum {
    partials: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    special: Option<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        if !value.is_finite() {
            self.special = Some(self.special.unwrap_or(0.0) + value);
            return;
        }
        let mut x = value;
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn merge(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
        if let Some(s) = other.special {
            self.add(s);
        }
    }

    pub fn value(&self) -> f64 {
        if let Some(s) = self.special {
            return s;
        }
        let p = &self.partials;
        let Some(&last) = p.last() else {
            return 0.0;
        };
        let mut n = p.len() - 1;
        let mut hi = last;
        let mut lo = 0.0;
        while n > 0 {
            n -= 1;
            let x = hi;
            let y = p[n];
            hi = x + y;
            lo = y - (hi - x);
            if lo != 0.0 {
                break;
            }
        }
        // Round half-even across the remaining partials.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        for v in iter {
            s.add(v);
        }
        s
    }
}

/// Exact sum and count of one error stream.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Accumulator {
    pub sum: ExactSum,
    pub count: usize,
}

impl Accumulator {
    pub fn push(&mut self, v: f64) {
        self.sum.add(v);
        self.count += 1;
    }

    pub fn merge(&mut self, other: &Accumulator) {
        self.sum.merge(&other.sum);
        self.count += other.count;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum.value() / self.count as f64)
    }

    pub fn root_mean(&self) -> Option<f64> {
        self.mean().map(f64::sqrt)
    }
}

fn check_len(est: usize, gt: usize) -> Result<(), MetricsError> {
    if est != gt {
        return Err(MetricsError::Length {
            estimated: est,
            truth: gt,
        });
    }
    Ok(())
}

fn position_errors(est: &[Pose2], gt: &[Pose2]) -> Result<Vec<f64>, MetricsError> {
    check_len(est.len(), gt.len())?;
    if est.is_empty() {
        return Err(MetricsError::Empty("trajectory"));
    }
    Ok(est.iter().zip(gt).map(|(e, g)| e.position().distance(&g.position())).collect())
}

pub fn robot_rmse(est: &[Pose2], gt: &[Pose2]) -> Result<f64, MetricsError> {
    let e = position_errors(est, gt)?;
    Ok((e.iter().map(|d| d * d).collect::<ExactSum>().value() / e.len() as f64).sqrt())
}

/// Mean position error; no alignment, the frame is fixed by the anchor.
pub fn ate(est: &[Pose2], gt: &[Pose2]) -> Result<f64, MetricsError> {
    let e = position_errors(est, gt)?;
    Ok(e.iter().copied().collect::<ExactSum>().value() / e.len() as f64)
}

fn rpe_terms(est: &[Pose2], gt: &[Pose2]) -> Result<Vec<f64>, MetricsError> {
    check_len(est.len(), gt.len())?;
    if est.len() < 2 {
        return Err(MetricsError::Empty("relative pose pairs"));
    }
    Ok((1..est.len())
        .map(|i| {
            let g = gt[i - 1].between(&gt[i]);
            let e = est[i - 1].between(&est[i]);
            g.between(&e).position().vector().norm()
        })
        .collect())
}

/// Mean translational error of consecutive relative motions.
pub fn rpe(est: &[Pose2], gt: &[Pose2]) -> Result<f64, MetricsError> {
    let t = rpe_terms(est, gt)?;
    Ok(t.iter().copied().collect::<ExactSum>().value() / t.len() as f64)
}

/// Squared landmark errors over every estimated `(ped, step)`.
fn landmark_sq(result: &SlamResult, episode: &EpisodeRecord) -> Result<Vec<f64>, MetricsError> {
    result
        .landmarks
        .iter()
        .map(|l| {
            let truth = episode.ped_position(l.ped_id, l.step).ok_or(MetricsError::MissingTruth {
                ped_id: l.ped_id,
                step: l.step,
            })?;
            Ok(l.position.distance(&truth).powi(2))
        })
        .collect()
}

pub fn lm_rmse(result: &SlamResult, episode: &EpisodeRecord) -> Result<f64, MetricsError> {
    let sq = landmark_sq(result, episode)?;
    if sq.is_empty() {
        return Err(MetricsError::Empty("landmarks"));
    }
    Ok((sq.iter().copied().collect::<ExactSum>().value() / sq.len() as f64).sqrt())
}

fn sde_terms(result: &SlamResult, episode: &EpisodeRecord) -> Result<Vec<f64>, MetricsError> {
    check_len(result.robot.len(), episode.len())?;
    let mut per_step: Vec<Vec<(u32, Point2)>> = vec![Vec::new(); episode.len()];
    for l in &result.landmarks {
        if let Some(v) = per_step.get_mut(l.step) {
            v.push((l.ped_id, l.position));
        }
    }
    let mut out = Vec::new();
    for (i, peds) in per_step.iter().enumerate() {
        if peds.is_empty() {
            continue;
        }
        let robot_est = result.robot[i].position();
        let robot_gt = episode.steps[i].robot.position();
        let mut d_est = f64::INFINITY;
        let mut d_gt = f64::INFINITY;
        for (id, p) in peds {
            let truth = episode
                .ped_position(*id, i)
                .ok_or(MetricsError::MissingTruth { ped_id: *id, step: i })?;
            d_est = d_est.min(robot_est.distance(p));
            d_gt = d_gt.min(robot_gt.distance(&truth));
        }
        out.push((d_est - d_gt).abs());
    }
    Ok(out)
}

pub fn sde(result: &SlamResult, episode: &EpisodeRecord) -> Result<f64, MetricsError> {
    let t = sde_terms(result, episode)?;
    if t.is_empty() {
        return Err(MetricsError::Empty("pedestrian estimates"));
    }
    Ok(t.iter().copied().collect::<ExactSum>().value() / t.len() as f64)
}

/// Squared forecast errors for offsets `1..=horizon` that have ground
/// truth. A prediction without positions is scored as a zero-velocity hold
/// at its origin when `zero_hold` is set and skipped otherwise.
fn prediction_sq(
    result: &SlamResult,
    episode: &EpisodeRecord,
    horizon: usize,
    zero_hold: bool,
) -> Result<Vec<f64>, MetricsError> {
    let mut out = Vec::new();
    for p in &result.predictions {
        if p.positions.is_empty() && !zero_hold {
            continue;
        }
        for k in 1..=horizon {
            let step = p.step + k;
            if step >= episode.len() {
                break;
            }
            let predicted = if p.positions.is_empty() {
                p.origin
            } else {
                match p.positions.get(k - 1) {
                    Some(q) => *q,
                    None => break,
                }
            };
            let truth = episode
                .ped_position(p.ped_id, step)
                .ok_or(MetricsError::MissingTruth { ped_id: p.ped_id, step })?;
            out.push(predicted.distance(&truth).powi(2));
        }
    }
    Ok(out)
}

pub fn pred_rmse(
    result: &SlamResult,
    episode: &EpisodeRecord,
    horizon: usize,
    zero_hold: bool,
) -> Result<f64, MetricsError> {
    let sq = prediction_sq(result, episode, horizon, zero_hold)?;
    if sq.is_empty() {
        return Err(MetricsError::Empty("predictions"));
    }
    Ok((sq.iter().copied().collect::<ExactSum>().value() / sq.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Forecast offsets scored; `None` uses the result's own horizon.
    pub horizon: Option<usize>,
    /// Score priors without forecasts as a zero-velocity hold.
    pub zero_hold_fallback: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            horizon: None,
            zero_hold_fallback: true,
        }
    }
}

/// Raw error sums of one episode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub seed: u64,
    pub robot_sq: Accumulator,
    pub robot_abs: Accumulator,
    pub lm_sq: Accumulator,
    pub rpe: Accumulator,
    pub sde: Accumulator,
    pub pred_sq: Accumulator,
}

impl EpisodeMetrics {
    pub fn robot_rmse(&self) -> Option<f64> {
        self.robot_sq.root_mean()
    }

    pub fn lm_rmse(&self) -> Option<f64> {
        self.lm_sq.root_mean()
    }

    pub fn ate(&self) -> Option<f64> {
        self.robot_abs.mean()
    }

    pub fn rpe_mean(&self) -> Option<f64> {
        self.rpe.mean()
    }

    pub fn sde(&self) -> Option<f64> {
        self.sde.mean()
    }

    pub fn pred_rmse(&self) -> Option<f64> {
        self.pred_sq.root_mean()
    }

    pub fn merge(&mut self, other: &EpisodeMetrics) {
        self.robot_sq.merge(&other.robot_sq);
        self.robot_abs.merge(&other.robot_abs);
        self.lm_sq.merge(&other.lm_sq);
        self.rpe.merge(&other.rpe);
        self.sde.merge(&other.sde);
        self.pred_sq.merge(&other.pred_sq);
    }
}

pub fn evaluate_episode(
    result: &SlamResult,
    episode: &EpisodeRecord,
    options: &MetricOptions,
) -> Result<EpisodeMetrics, MetricsError> {
    let gt: Vec<Pose2> = episode.steps.iter().map(|s| s.robot).collect();
    let mut m = EpisodeMetrics {
        seed: episode.seed,
        ..Default::default()
    };
    for e in position_errors(&result.robot, &gt)? {
        m.robot_sq.push(e * e);
        m.robot_abs.push(e);
    }
    for v in landmark_sq(result, episode)? {
        m.lm_sq.push(v);
    }
    if gt.len() >= 2 {
        for v in rpe_terms(&result.robot, &gt)? {
            m.rpe.push(v);
        }
    }
    for v in sde_terms(result, episode)? {
        m.sde.push(v);
    }
    let horizon = options.horizon.unwrap_or(result.horizon);
    for v in prediction_sq(result, episode, horizon, options.zero_hold_fallback)? {
        m.pred_sq.push(v);
    }
    Ok(m)
}

/// One benchmark table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub episodes: usize,
    pub horizon: usize,
    pub robot_rmse: Option<f64>,
    pub lm_rmse: Option<f64>,
    pub ate: Option<f64>,
    pub rpe_mean: Option<f64>,
    pub sde: Option<f64>,
    pub pred_rmse: Option<f64>,
    pub per_episode: Vec<EpisodeMetrics>,
}

pub const TABLE_HEADER: [&str; 7] = ["Method", "Robot RMSE", "LM RMSE", "ATE", "RPE", "SDE", "Pred. RMSE"];

pub const EPISODE_HEADER: [&str; 8] = [
    "Method",
    "Seed",
    "Robot RMSE",
    "LM RMSE",
    "ATE",
    "RPE",
    "SDE",
    "Pred. RMSE",
];

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsReport {
    /// Cells in `TABLE_HEADER` order; undefined metrics are empty.
    pub fn table_row(&self) -> Vec<String> {
        vec![
            self.method.clone(),
            cell(self.robot_rmse),
            cell(self.lm_rmse),
            cell(self.ate),
            cell(self.rpe_mean),
            cell(self.sde),
            cell(self.pred_rmse),
        ]
    }

    /// Rows in `EPISODE_HEADER` order.
    pub fn episode_rows(&self) -> Vec<Vec<String>> {
        self.per_episode
            .iter()
            .map(|e| {
                vec![
                    self.method.clone(),
                    e.seed.to_string(),
                    cell(e.robot_rmse()),
                    cell(e.lm_rmse()),
                    cell(e.ate()),
                    cell(e.rpe_mean()),
                    cell(e.sde()),
                    cell(e.pred_rmse()),
                ]
            })
            .collect()
    }
}

/// Pools per-episode sums into one report.
pub fn aggregate(method: &str, horizon: usize, episodes: &[EpisodeMetrics]) -> MetricsReport {
    let mut total = EpisodeMetrics::default();
    for e in episodes {
        total.merge(e);
    }
    MetricsReport {
        method: method.to_string(),
        episodes: episodes.len(),
        horizon,
        robot_rmse: total.robot_rmse(),
        lm_rmse: total.lm_rmse(),
        ate: total.ate(),
        rpe_mean: total.rpe_mean(),
        sde: total.sde(),
        pred_rmse: total.pred_rmse(),
        per_episode: episodes.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_sum_is_order_free() {
        let v = [1e100, 1.0, -1e100, 1e-30, 3.0, -2.5];
        let a: ExactSum = v.iter().copied().collect();
        let b: ExactSum = v.iter().rev().copied().collect();
        assert_eq!(a.value(), 1.5 + 1e-30);
        assert_eq!(a.value(), b.value());
        let tenths: ExactSum = std::iter::repeat_n(0.1, 10).collect();
        assert_eq!(tenths.value(), 1.0);
    }

    #[test]
    fn rmse_examples() {
        let gt = [Pose2::new(0.0, 0.0, 0.0), Pose2::new(1.0, 0.0, 0.0)];
        assert_eq!(robot_rmse(&gt, &gt).unwrap(), 0.0);
        let shifted: Vec<Pose2> = gt.iter().map(|p| Pose2::new(p.x() + 1.0, p.y(), p.theta())).collect();
        assert!((robot_rmse(&shifted, &gt).unwrap() - 1.0).abs() < 1e-15);
        assert!((ate(&shifted, &gt).unwrap() - 1.0).abs() < 1e-15);
        assert!(rpe(&shifted, &gt).unwrap().abs() < 1e-15);
        let one = [gt[0], Pose2::new(1.0, 1.0, 0.0)];
        assert!((robot_rmse(&one, &gt).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(robot_rmse(&one[..1], &gt), Err(MetricsError::Length { .. })));
        assert!(matches!(rpe(&gt[..1], &gt[..1]), Err(MetricsError::Empty(_))));
    }
}

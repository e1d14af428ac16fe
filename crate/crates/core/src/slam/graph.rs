use std::collections::HashMap;

use nalgebra::{Cholesky, Matrix2, Matrix3, SMatrix, Vector2};
use serde::{Deserialize, Serialize};

use super::SlamError;
use crate::geometry::{normalize_angle, observation_jacobians, observation_model, Point2, Pose2, RangeBearing};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VariableKind {
    RobotPose,
    LandmarkPos,
    LandmarkVel,
}

impl VariableKind {
    pub fn dim(self) -> usize {
        match self {
            VariableKind::RobotPose => 3,
            _ => 2,
        }
    }
}

/// Ordered by step first, which keeps the normal matrix banded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VariableId {
    pub step: usize,
    pub kind: VariableKind,
    /// Pedestrian id; zero for robot poses.
    pub ped: u32,
}

impl VariableId {
    pub fn pose(step: usize) -> Self {
        Self {
            step,
            kind: VariableKind::RobotPose,
            ped: 0,
        }
    }

    pub fn landmark(ped: u32, step: usize) -> Self {
        Self {
            step,
            kind: VariableKind::LandmarkPos,
            ped,
        }
    }

    pub fn velocity(ped: u32, step: usize) -> Self {
        Self {
            step,
            kind: VariableKind::LandmarkVel,
            ped,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FactorKind {
    PoseAnchor,
    LandmarkAnchor,
    Odometry,
    RangeBearingObs,
    CvmPosition,
    CvmVelocity,
    NeuralDisplacement,
    MahalanobisDisplacement,
}

impl FactorKind {
    pub fn arity(self) -> usize {
        match self {
            FactorKind::PoseAnchor | FactorKind::LandmarkAnchor => 1,
            FactorKind::Odometry
            | FactorKind::RangeBearingObs
            | FactorKind::NeuralDisplacement
            | FactorKind::MahalanobisDisplacement => 2,
            FactorKind::CvmPosition => 3,
            FactorKind::CvmVelocity => 4,
        }
    }

    pub fn residual_dim(self) -> usize {
        match self {
            FactorKind::PoseAnchor | FactorKind::Odometry => 3,
            FactorKind::CvmVelocity => 4,
            _ => 2,
        }
    }

    pub fn is_kinematic(self) -> bool {
        matches!(
            self,
            FactorKind::CvmPosition
                | FactorKind::CvmVelocity
                | FactorKind::NeuralDisplacement
                | FactorKind::MahalanobisDisplacement
        )
    }

    fn expected_kinds(self) -> &'static [VariableKind] {
        use VariableKind::*;
        match self {
            FactorKind::PoseAnchor => &[RobotPose],
            FactorKind::LandmarkAnchor => &[LandmarkPos],
            FactorKind::Odometry => &[RobotPose, RobotPose],
            FactorKind::RangeBearingObs => &[RobotPose, LandmarkPos],
            FactorKind::CvmPosition => &[LandmarkPos, LandmarkPos, LandmarkPos],
            FactorKind::CvmVelocity => &[LandmarkPos, LandmarkPos, LandmarkVel, LandmarkVel],
            FactorKind::NeuralDisplacement | FactorKind::MahalanobisDisplacement => &[LandmarkPos, LandmarkPos],
        }
    }
}

/// Measurement payload; interpretation depends on the factor kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Measurement {
    Pose(Pose2),
    Point(Point2),
    /// Relative motion `(dx, dy, dtheta)` in the frame of the first pose.
    Relative([f64; 3]),
    RangeBearing(RangeBearing),
    /// Second-difference or CVM residual time step.
    Dt(f64),
    Displacement(Vector2<f64>),
}

pub(crate) const RMAX: usize = 4;
pub(crate) const VMAX: usize = 3;

#[derive(Debug, Clone)]
pub struct Factor {
    pub kind: FactorKind,
    pub vars: Vec<VariableId>,
    pub measurement: Measurement,
    /// Residual information matrix (SPD, `residual_dim` square).
    information: [[f64; RMAX]; RMAX],
    /// Upper-triangular `W` with `W^T W = information`.
    whitener: [[f64; RMAX]; RMAX],
    slots: Vec<usize>,
}

fn spd_whitener<const D: usize>(info: &SMatrix<f64, D, D>) -> Option<SMatrix<f64, D, D>> {
    if info.iter().any(|v| !v.is_finite()) || (info - info.transpose()).abs().max() > 1e-9 * info.abs().max() {
        return None;
    }
    Cholesky::new(*info).map(|c| c.l().transpose())
}

impl Factor {
    fn with_info<const D: usize>(
        kind: FactorKind,
        vars: Vec<VariableId>,
        measurement: Measurement,
        info: SMatrix<f64, D, D>,
    ) -> Result<Self, SlamError> {
        let w = spd_whitener(&info).ok_or(SlamError::InformationNotSpd(kind))?;
        let mut information = [[0.0; RMAX]; RMAX];
        let mut whitener = [[0.0; RMAX]; RMAX];
        for r in 0..D {
            for c in 0..D {
                information[r][c] = info[(r, c)];
                whitener[r][c] = w[(r, c)];
            }
        }
        Ok(Self {
            kind,
            vars,
            measurement,
            information,
            whitener,
            slots: Vec::new(),
        })
    }

    pub fn pose_anchor(var: VariableId, prior: Pose2, info: Matrix3<f64>) -> Result<Self, SlamError> {
        Self::with_info(FactorKind::PoseAnchor, vec![var], Measurement::Pose(prior), info)
    }

    pub fn landmark_anchor(var: VariableId, prior: Point2, info: Matrix2<f64>) -> Result<Self, SlamError> {
        Self::with_info(FactorKind::LandmarkAnchor, vec![var], Measurement::Point(prior), info)
    }

    pub fn odometry(from: VariableId, to: VariableId, delta: [f64; 3], info: Matrix3<f64>) -> Result<Self, SlamError> {
        Self::with_info(FactorKind::Odometry, vec![from, to], Measurement::Relative(delta), info)
    }

    pub fn observation(pose: VariableId, lm: VariableId, z: RangeBearing, info: Matrix2<f64>) -> Result<Self, SlamError> {
        Self::with_info(FactorKind::RangeBearingObs, vec![pose, lm], Measurement::RangeBearing(z), info)
    }

    pub fn cvm_position(vars: [VariableId; 3], dt: f64, info: Matrix2<f64>) -> Result<Self, SlamError> {
        Self::with_info(FactorKind::CvmPosition, vars.to_vec(), Measurement::Dt(dt), info)
    }

    /// Variables `[m_prev, m_cur, v_prev, v_cur]`.
    pub fn cvm_velocity(
        vars: [VariableId; 4],
        dt: f64,
        info_position: Matrix2<f64>,
        info_velocity: Matrix2<f64>,
    ) -> Result<Self, SlamError> {
        let mut info = SMatrix::<f64, 4, 4>::zeros();
        info.fixed_view_mut::<2, 2>(0, 0).copy_from(&info_position);
        info.fixed_view_mut::<2, 2>(2, 2).copy_from(&info_velocity);
        Self::with_info(FactorKind::CvmVelocity, vars.to_vec(), Measurement::Dt(dt), info)
    }

    pub fn displacement(
        from: VariableId,
        to: VariableId,
        mean: Vector2<f64>,
        info: Matrix2<f64>,
        mahalanobis: bool,
    ) -> Result<Self, SlamError> {
        let kind = if mahalanobis {
            FactorKind::MahalanobisDisplacement
        } else {
            FactorKind::NeuralDisplacement
        };
        Self::with_info(kind, vec![from, to], Measurement::Displacement(mean), info)
    }

    pub fn information(&self) -> Vec<Vec<f64>> {
        let d = self.kind.residual_dim();
        (0..d).map(|r| self.information[r][..d].to_vec()).collect()
    }
}

/// Raw residual and per-variable Jacobians, row-major with row stride
/// `VMAX` whatever the variable dimension.
pub(crate) struct Linearized {
    pub r: [f64; RMAX],
    pub jac: [[f64; RMAX * VMAX]; 4],
}

fn pose_at(values: &[f64], off: usize) -> Pose2 {
    Pose2::new(values[off], values[off + 1], values[off + 2])
}

fn point_at(values: &[f64], off: usize) -> Point2 {
    Point2::new(values[off], values[off + 1])
}

/// Variables with current estimates plus factors over a window of steps.
#[derive(Debug, Clone)]
pub struct FactorGraph {
    ids: Vec<VariableId>,
    /// Value offset of each variable slot.
    value_offset: Vec<usize>,
    values: Vec<f64>,
    index: HashMap<VariableId, usize>,
    factors: Vec<Factor>,
    pub i_min: usize,
    pub i_now: usize,
}

impl FactorGraph {
    pub fn new(i_min: usize, i_now: usize) -> Self {
        Self {
            ids: Vec::new(),
            value_offset: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            factors: Vec::new(),
            i_min,
            i_now,
        }
    }

    pub fn add_pose(&mut self, step: usize, init: Pose2) -> Result<(), SlamError> {
        self.add_variable(VariableId::pose(step), &[init.x(), init.y(), init.theta()])
    }

    pub fn add_landmark(&mut self, ped: u32, step: usize, init: Point2) -> Result<(), SlamError> {
        self.add_variable(VariableId::landmark(ped, step), &[init.x, init.y])
    }

    pub fn add_velocity(&mut self, ped: u32, step: usize, init: Vector2<f64>) -> Result<(), SlamError> {
        self.add_variable(VariableId::velocity(ped, step), &[init.x, init.y])
    }

    pub fn add_variable(&mut self, id: VariableId, init: &[f64]) -> Result<(), SlamError> {
        if init.len() != id.kind.dim() || init.iter().any(|v| !v.is_finite()) {
            return Err(SlamError::InvalidGraph(format!("bad initial value for {id:?}")));
        }
        if self.index.contains_key(&id) {
            return Err(SlamError::InvalidGraph(format!("duplicate variable {id:?}")));
        }
        self.index.insert(id, self.ids.len());
        self.ids.push(id);
        self.value_offset.push(self.values.len());
        self.values.extend_from_slice(init);
        Ok(())
    }

    pub fn add_factor(&mut self, mut f: Factor) -> Result<(), SlamError> {
        let kinds = f.kind.expected_kinds();
        if f.vars.len() != kinds.len() || f.vars.iter().zip(kinds).any(|(v, k)| v.kind != *k) {
            return Err(SlamError::InvalidGraph(format!("{:?} factor has wrong variables", f.kind)));
        }
        f.slots = f
            .vars
            .iter()
            .map(|v| self.index.get(v).copied().ok_or(SlamError::MissingVariable(*v)))
            .collect::<Result<_, _>>()?;
        self.factors.push(f);
        Ok(())
    }

    pub fn variables(&self) -> &[VariableId] {
        &self.ids
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn contains(&self, id: &VariableId) -> bool {
        self.index.contains_key(id)
    }

    pub fn count_factors(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|f| f.kind == kind).count()
    }

    pub fn count_variables(&self, kind: VariableKind) -> usize {
        self.ids.iter().filter(|v| v.kind == kind).count()
    }

    fn slot_values(&self, id: &VariableId) -> Option<&[f64]> {
        let s = *self.index.get(id)?;
        let off = self.value_offset[s];
        Some(&self.values[off..off + id.kind.dim()])
    }

    pub fn pose(&self, step: usize) -> Option<Pose2> {
        self.slot_values(&VariableId::pose(step)).map(|v| Pose2::new(v[0], v[1], v[2]))
    }

    pub fn landmark(&self, ped: u32, step: usize) -> Option<Point2> {
        self.slot_values(&VariableId::landmark(ped, step)).map(|v| Point2::new(v[0], v[1]))
    }

    pub fn velocity(&self, ped: u32, step: usize) -> Option<Vector2<f64>> {
        self.slot_values(&VariableId::velocity(ped, step)).map(|v| Vector2::new(v[0], v[1]))
    }

    pub(crate) fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn set_values(&mut self, v: Vec<f64>) {
        self.values = v;
    }

    /// Applies a tangent-space increment laid out by `tangent_offset`.
    pub(crate) fn retract(&self, values: &[f64], delta: &[f64], tangent_offset: &[usize]) -> Vec<f64> {
        let mut out = values.to_vec();
        for (s, id) in self.ids.iter().enumerate() {
            let vo = self.value_offset[s];
            let to = tangent_offset[s];
            for k in 0..id.kind.dim() {
                out[vo + k] += delta[to + k];
            }
            if id.kind == VariableKind::RobotPose {
                out[vo + 2] = normalize_angle(out[vo + 2]);
            }
        }
        out
    }

    /// Total whitened cost `sum r^T Lambda r` at `values`.
    pub fn cost_at(&self, values: &[f64]) -> f64 {
        self.factors
            .iter()
            .map(|f| {
                let lin = self.linearize(f, values, false);
                whiten_norm2(f, &lin.r)
            })
            .sum()
    }

    pub fn cost(&self) -> f64 {
        self.cost_at(&self.values)
    }

    /// Kinematic-factor share of the cost.
    pub fn kinematic_cost(&self) -> f64 {
        self.factors
            .iter()
            .filter(|f| f.kind.is_kinematic())
            .map(|f| whiten_norm2(f, &self.linearize(f, &self.values, false).r))
            .sum()
    }

    pub(crate) fn linearize(&self, f: &Factor, values: &[f64], jacobians: bool) -> Linearized {
        let mut r = [0.0; RMAX];
        let mut jac = [[0.0; RMAX * VMAX]; 4];
        let off = |i: usize| self.value_offset[f.slots[i]];
        match (&f.kind, &f.measurement) {
            (FactorKind::PoseAnchor, Measurement::Pose(p0)) => {
                let p = pose_at(values, off(0));
                r[0] = p.x() - p0.x();
                r[1] = p.y() - p0.y();
                r[2] = normalize_angle(p.theta() - p0.theta());
                if jacobians {
                    for k in 0..3 {
                        jac[0][k * 3 + k] = 1.0;
                    }
                }
            }
            (FactorKind::LandmarkAnchor, Measurement::Point(m0)) => {
                let m = point_at(values, off(0));
                r[0] = m.x - m0.x;
                r[1] = m.y - m0.y;
                if jacobians {
                    jac[0][0] = 1.0;
                    jac[0][3 + 1] = 1.0;
                }
            }
            (FactorKind::Odometry, Measurement::Relative(z)) => {
                let a = pose_at(values, off(0));
                let b = pose_at(values, off(1));
                let (s, c) = a.theta().sin_cos();
                let dx = b.x() - a.x();
                let dy = b.y() - a.y();
                r[0] = c * dx + s * dy - z[0];
                r[1] = -s * dx + c * dy - z[1];
                r[2] = normalize_angle(b.theta() - a.theta() - z[2]);
                if jacobians {
                    jac[0][..9].copy_from_slice(&[-c, -s, -s * dx + c * dy, s, -c, -c * dx - s * dy, 0.0, 0.0, -1.0]);
                    jac[1][..9].copy_from_slice(&[c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0]);
                }
            }
            (FactorKind::RangeBearingObs, Measurement::RangeBearing(z)) => {
                let p = pose_at(values, off(0));
                let m = point_at(values, off(1));
                match observation_model(&p, &m) {
                    Ok(h) => {
                        r[0] = h.range - z.range;
                        r[1] = normalize_angle(h.bearing - z.bearing);
                        if jacobians {
                            if let Ok((jp, jm)) = observation_jacobians(&p, &m) {
                                for row in 0..2 {
                                    for col in 0..3 {
                                        jac[0][row * 3 + col] = jp[(row, col)];
                                    }
                                    for col in 0..2 {
                                        jac[1][row * 3 + col] = jm[(row, col)];
                                    }
                                }
                            }
                        }
                    }
                    Err(_) => {
                        // Landmark on top of the robot: bearing undefined.
                        r[0] = -z.range;
                    }
                }
            }
            (FactorKind::CvmPosition, Measurement::Dt(dt)) => {
                let inv = 1.0 / (dt * dt);
                let m0 = point_at(values, off(0));
                let m1 = point_at(values, off(1));
                let m2 = point_at(values, off(2));
                r[0] = (m2.x - 2.0 * m1.x + m0.x) * inv;
                r[1] = (m2.y - 2.0 * m1.y + m0.y) * inv;
                if jacobians {
                    for (b, coef) in [(0, inv), (1, -2.0 * inv), (2, inv)] {
                        jac[b][0] = coef;
                        jac[b][4] = coef;
                    }
                }
            }
            (FactorKind::CvmVelocity, Measurement::Dt(dt)) => {
                let m0 = point_at(values, off(0));
                let m1 = point_at(values, off(1));
                let v0 = point_at(values, off(2));
                let v1 = point_at(values, off(3));
                r[0] = m1.x - m0.x - v0.x * dt;
                r[1] = m1.y - m0.y - v0.y * dt;
                r[2] = v1.x - v0.x;
                r[3] = v1.y - v0.y;
                if jacobians {
                    jac[0][0] = -1.0;
                    jac[0][4] = -1.0;
                    jac[1][0] = 1.0;
                    jac[1][4] = 1.0;
                    jac[2][0] = -dt;
                    jac[2][4] = -dt;
                    jac[2][6] = -1.0;
                    jac[2][10] = -1.0;
                    jac[3][6] = 1.0;
                    jac[3][10] = 1.0;
                }
            }
            (
                FactorKind::NeuralDisplacement | FactorKind::MahalanobisDisplacement,
                Measurement::Displacement(mean),
            ) => {
                let m0 = point_at(values, off(0));
                let m1 = point_at(values, off(1));
                r[0] = m1.x - m0.x - mean.x;
                r[1] = m1.y - m0.y - mean.y;
                if jacobians {
                    jac[0][0] = -1.0;
                    jac[0][4] = -1.0;
                    jac[1][0] = 1.0;
                    jac[1][4] = 1.0;
                }
            }
            _ => unreachable!("factor payload matches its kind by construction"),
        }
        Linearized { r, jac }
    }

    pub(crate) fn factor_slots<'a>(&self, f: &'a Factor) -> &'a [usize] {
        &f.slots
    }

    pub(crate) fn slot_id(&self, slot: usize) -> VariableId {
        self.ids[slot]
    }
}

pub(crate) fn whiten_norm2(f: &Factor, r: &[f64; RMAX]) -> f64 {
    let d = f.kind.residual_dim();
    let mut s = 0.0;
    for i in 0..d {
        let mut w = 0.0;
        for j in i..d {
            w += f.whitener[i][j] * r[j];
        }
        s += w * w;
    }
    s
}

pub(crate) fn whiten(f: &Factor, v: &[f64; RMAX]) -> [f64; RMAX] {
    let d = f.kind.residual_dim();
    let mut out = [0.0; RMAX];
    for i in 0..d {
        for j in i..d {
            out[i] += f.whitener[i][j] * v[j];
        }
    }
    out
}

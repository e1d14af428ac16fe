//! Planar rigid-body kinematics and the range-bearing sensor model.
//!
//! The robot moves as a forward-Euler unicycle: position is advanced along
//! the heading held *before* the step, then the heading is advanced. The
//! same `motion_model` drives the simulator and the odometry factor, so the
//! estimator sees exactly the kinematics that generated the data.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite value: {0}")]
    NonFinite(&'static str),
    #[error("time step must be positive, got {0}")]
    InvalidTimeStep(f64),
    #[error("landmark coincides with the sensor position; bearing is undefined")]
    CoincidentPoint,
    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> Result<f64, GeometryError> {
    if !a.is_finite() {
        return Err(GeometryError::NonFinite("angle"));
    }
    Ok(normalize_angle(a))
}

/// Infallible variant of [`wrap_angle`] for values already known to be finite.
#[inline]
pub fn normalize_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Robot pose in SE(2). The heading is kept wrapped into `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose2 {
    x: f64,
    y: f64,
    theta: f64,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    x: f64,
    y: f64,
    theta: f64,
}

impl TryFrom<PoseRepr> for Pose2 {
    type Error = GeometryError;

    fn try_from(r: PoseRepr) -> Result<Self, Self::Error> {
        Pose2::try_new(r.x, r.y, r.theta)
    }
}

impl From<Pose2> for PoseRepr {
    fn from(p: Pose2) -> Self {
        PoseRepr {
            x: p.x,
            y: p.y,
            theta: p.theta,
        }
    }
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn try_new(x: f64, y: f64, theta: f64) -> Result<Self, GeometryError> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(GeometryError::NonFinite("pose position"));
        }
        Ok(Self {
            x,
            y,
            theta: wrap_angle(theta)?,
        })
    }

    pub fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    /// Applies a tangent-space increment `(dx, dy, dtheta)`, re-wrapping the heading.
    pub fn retract(&self, delta: &[f64]) -> Self {
        Self::new(self.x + delta[0], self.y + delta[1], self.theta + delta[2])
    }

    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            -(c * self.x + s * self.y),
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// Relative motion `self^-1 * other`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        Point2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }
}

/// Unicycle command: forward speed (m/s) and yaw rate (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub v: f64,
    pub omega: f64,
}

impl Control {
    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn clamped(&self, v_max: f64, omega_max: f64) -> Self {
        Self {
            v: self.v.clamp(-v_max, v_max),
            omega: self.omega.clamp(-omega_max, omega_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn vector(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v.x, v.y)
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn offset(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RangeBearing {
    pub range: f64,
    pub bearing: f64,
}

impl RangeBearing {
    pub fn new(range: f64, bearing: f64) -> Self {
        Self {
            range,
            bearing: normalize_angle(bearing),
        }
    }
}

fn check_spd<const D: usize>(
    m: &nalgebra::SMatrix<f64, D, D>,
) -> Result<(), GeometryError>
where
    nalgebra::Const<D>: nalgebra::DimMin<nalgebra::Const<D>, Output = nalgebra::Const<D>>,
{
    if m.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite("covariance"));
    }
    let scale = m.abs().max().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).abs().max() > 1e-12 * scale {
        return Err(GeometryError::NotPositiveDefinite);
    }
    m.cholesky().map(|_| ()).ok_or(GeometryError::NotPositiveDefinite)
}

/// Symmetric positive definite 2x2 covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 2]; 2]", into = "[[f64; 2]; 2]")]
pub struct Cov2(Matrix2<f64>);

impl Cov2 {
    pub fn new(m: Matrix2<f64>) -> Result<Self, GeometryError> {
        check_spd(&m)?;
        Ok(Self(m))
    }

    pub fn isotropic(variance: f64) -> Result<Self, GeometryError> {
        Self::new(Matrix2::identity() * variance)
    }

    pub fn diagonal(a: f64, b: f64) -> Result<Self, GeometryError> {
        Self::new(Matrix2::new(a, 0.0, 0.0, b))
    }

    pub fn matrix(&self) -> &Matrix2<f64> {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn information(&self) -> Matrix2<f64> {
        self.0
            .cholesky()
            .expect("validated at construction")
            .inverse()
    }
}

impl TryFrom<[[f64; 2]; 2]> for Cov2 {
    type Error = GeometryError;

    fn try_from(rows: [[f64; 2]; 2]) -> Result<Self, Self::Error> {
        Cov2::new(Matrix2::new(rows[0][0], rows[0][1], rows[1][0], rows[1][1]))
    }
}

impl From<Cov2> for [[f64; 2]; 2] {
    fn from(c: Cov2) -> Self {
        [[c.0[(0, 0)], c.0[(0, 1)]], [c.0[(1, 0)], c.0[(1, 1)]]]
    }
}

/// Symmetric positive definite 3x3 covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cov3(Matrix3<f64>);

impl Cov3 {
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        check_spd(&m)?;
        Ok(Self(m))
    }

    pub fn diagonal(a: f64, b: f64, c: f64) -> Result<Self, GeometryError> {
        Self::new(Matrix3::from_diagonal(&nalgebra::Vector3::new(a, b, c)))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn information(&self) -> Matrix3<f64> {
        self.0
            .cholesky()
            .expect("validated at construction")
            .inverse()
    }
}

fn check_dt(dt: f64) -> Result<(), GeometryError> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(GeometryError::InvalidTimeStep(dt));
    }
    Ok(())
}

/// Forward-Euler unicycle step.
pub fn motion_model(pose: &Pose2, u: &Control, dt: f64) -> Result<Pose2, GeometryError> {
    check_dt(dt)?;
    if !(u.v.is_finite() && u.omega.is_finite()) {
        return Err(GeometryError::NonFinite("control"));
    }
    let (s, c) = pose.theta.sin_cos();
    Ok(Pose2::new(
        pose.x + u.v * c * dt,
        pose.y + u.v * s * dt,
        pose.theta + u.omega * dt,
    ))
}

/// Partial derivatives of [`motion_model`] with respect to the input pose.
pub fn motion_jacobian(pose: &Pose2, u: &Control, dt: f64) -> Result<Matrix3<f64>, GeometryError> {
    check_dt(dt)?;
    let (s, c) = pose.theta.sin_cos();
    Ok(Matrix3::new(
        1.0,
        0.0,
        -u.v * s * dt,
        0.0,
        1.0,
        u.v * c * dt,
        0.0,
        0.0,
        1.0,
    ))
}

pub fn observation_model(pose: &Pose2, lm: &Point2) -> Result<RangeBearing, GeometryError> {
    let dx = lm.x - pose.x;
    let dy = lm.y - pose.y;
    let range = dx.hypot(dy);
    if !range.is_finite() {
        return Err(GeometryError::NonFinite("landmark"));
    }
    if range == 0.0 {
        return Err(GeometryError::CoincidentPoint);
    }
    Ok(RangeBearing {
        range,
        bearing: normalize_angle(dy.atan2(dx) - pose.theta),
    })
}

/// Jacobians of [`observation_model`] with respect to the pose `(x, y, theta)`
/// and the landmark `(x, y)`. Rows are `(range, bearing)`.
pub fn observation_jacobians(
    pose: &Pose2,
    lm: &Point2,
) -> Result<(Matrix2x3<f64>, Matrix2<f64>), GeometryError> {
    let dx = lm.x - pose.x;
    let dy = lm.y - pose.y;
    let q = dx * dx + dy * dy;
    if !q.is_finite() {
        return Err(GeometryError::NonFinite("landmark"));
    }
    if q == 0.0 {
        return Err(GeometryError::CoincidentPoint);
    }
    let r = q.sqrt();
    let d_pose = Matrix2x3::new(-dx / r, -dy / r, 0.0, dy / q, -dx / q, -1.0);
    let d_lm = Matrix2::new(dx / r, dy / r, -dy / q, dx / q);
    Ok((d_pose, d_lm))
}

/// Landmark position implied by a range-bearing reading taken from `pose`.
pub fn inverse_observation(pose: &Pose2, z: &RangeBearing) -> Point2 {
    let a = pose.theta + z.bearing;
    Point2::new(pose.x + z.range * a.cos(), pose.y + z.range * a.sin())
}

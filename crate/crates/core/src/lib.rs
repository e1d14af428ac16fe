//! Dynamic GraphSLAM over moving pedestrians with pluggable motion priors.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: SE(2) kinematics and the range-bearing sensor model.
//! - [`simulator`]: a headed social-force crowd with a sampling-MPC robot.
//! - [`dataset`]: episode persistence, train/test splits and sample windows.
//! - [`neuralnet`]: a small dense stack (MLP, graph attention, reverse-mode
//!   gradients, Adam) for the learned velocity predictors.
//! - [`priors`]: constant-velocity and learned kinematic priors, including
//!   Monte Carlo rollouts and their empirical statistics.
//! - [`slam`]: the sliding-window factor graph and its Levenberg-Marquardt solver.
//! - [`metrics`]: trajectory, tracking and prediction error metrics.

pub mod dataset;
pub mod geometry;
pub mod metrics;
pub mod neuralnet;
pub mod priors;
pub mod rng;
pub mod simulator;
pub mod slam;

pub use geometry::{Control, Cov2, Cov3, Point2, Pose2, RangeBearing};

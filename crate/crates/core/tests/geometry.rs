mod common;

use crowdslam::geometry::{
    inverse_observation, normalize_angle, observation_model, wrap_angle, Pose2, RangeBearing,
};
use crowdslam::rng;
use crowdslam::Point2;
use proptest::prelude::*;

#[test]
fn motion_jacobian_matches_finite_differences() {
    let mut r = rng::stream(1, &[]);
    let worst = (0..1000).map(|_| common::motion_fd_error(&mut r)).fold(0.0, f64::max);
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn observation_jacobians_match_finite_differences() {
    let mut r = rng::stream(2, &[]);
    let worst = (0..1000).map(|_| common::observation_fd_error(&mut r)).fold(0.0, f64::max);
    assert!(worst < 1e-5, "{worst}");
}

fn pose() -> impl Strategy<Value = Pose2> {
    (-20.0f64..20.0, -20.0f64..20.0, -10.0f64..10.0).prop_map(|(x, y, t)| Pose2::new(x, y, t))
}

proptest! {
    #[test]
    fn wrapped_angles_lie_in_half_open_interval(a in -1e4f64..1e4) {
        let w = wrap_angle(a).unwrap();
        prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
        let turns = (a - w) / std::f64::consts::TAU;
        prop_assert!((turns - turns.round()).abs() < 1e-9);
        prop_assert_eq!(normalize_angle(w), w);
    }

    #[test]
    fn compose_inverse_is_identity(p in pose(), q in pose()) {
        let back = p.compose(&q).compose(&q.inverse());
        prop_assert!((back.x() - p.x()).abs() < 1e-9 && (back.y() - p.y()).abs() < 1e-9);
        prop_assert!(normalize_angle(back.theta() - p.theta()).abs() < 1e-12);
        let rel = p.between(&q);
        let q2 = p.compose(&rel);
        prop_assert!(q2.position().distance(&q.position()) < 1e-9);
    }

    #[test]
    fn observation_round_trip(p in pose(), range in 0.05f64..30.0, bearing in -3.1f64..3.1) {
        let z = RangeBearing::new(range, bearing);
        let lm = inverse_observation(&p, &z);
        let back = observation_model(&p, &lm).unwrap();
        prop_assert!((back.range - range).abs() < 1e-9);
        prop_assert!(normalize_angle(back.bearing - bearing).abs() < 1e-9);
    }
}

#[test]
fn coincident_landmark_is_rejected() {
    let p = Pose2::new(1.0, 2.0, 0.0);
    assert!(observation_model(&p, &Point2::new(1.0, 2.0)).is_err());
}

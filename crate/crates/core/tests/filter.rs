mod common;

use common::scalar_gain;
use flowsplat_core::deform::{FnField, StaticField, TimeStamp};
use flowsplat_core::scene::CameraModel;
use flowsplat_core::tvr::{forecast, kalman_update, EKFTrack, NoiseModel};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

fn track_at(x: Vector3<f64>, p: f64) -> EKFTrack {
    let cam = CameraModel::from_intrinsics(1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros(), 1, 1).unwrap();
    let mut t = EKFTrack::new(&StaticField, 0, x, TimeStamp::frame(0, 4), &[cam], p);
    t.x = x;
    t
}

#[test]
fn scalar_gain_matches_hand_solution() {
    // P = 1, Q = 0, R = 1: K = 1/2 and a unit-2 innovation moves x to 1.
    let (k, x) = scalar_gain();
    assert!((k - 0.5).abs() < 1e-12, "gain {k}");
    assert!((x - 1.0).abs() < 1e-12, "posterior {x}");
}

#[test]
fn forecast_without_noise_follows_nominal_motion() {
    let field = FnField(|_: usize, mu: &Vector3<f64>, t: f64| Vector3::new(0.3 * t, -0.1 * t, 0.05 * t * mu[2]));
    let mu0 = Vector3::new(0.2, -0.4, 3.0);
    let cam = CameraModel::from_intrinsics(1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros(), 1, 1).unwrap();
    let mut track = EKFTrack::new(&field, 0, mu0, TimeStamp::frame(0, 4), &[cam], 0.0);
    let noise = NoiseModel {
        q: Matrix3::zeros(),
        rn: Matrix2::identity(),
    };
    for k in 1..4 {
        let (x, p, fallback) = forecast(&track, &field, &noise, TimeStamp::frame(k - 1, 4), TimeStamp::frame(k, 4), 1e-4);
        assert!(!fallback);
        let t = TimeStamp::frame(k, 4).t;
        let nominal = mu0 + Vector3::new(0.3 * t, -0.1 * t, 0.05 * t * mu0[2]);
        assert!((x - nominal).norm() < 1e-9, "frame {k}: {x:?} vs {nominal:?}");
        assert!(p.norm() < 1e-12);
        track.x = x;
        track.p = p;
    }
}

#[test]
fn huge_measurement_noise_ignores_observation() {
    let track = track_at(Vector3::new(0.1, 0.2, 3.0), 0.5);
    let j_h = Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let (x, p, _) = kalman_update(&track.x, &track.p, &Vector2::new(4.0, -3.0), &j_h, &(Matrix2::identity() * 1e12)).unwrap();
    assert!((x - track.x).norm() < 1e-9);
    assert!((p - track.p).norm() < 1e-9);
}

#[test]
fn small_measurement_noise_shrinks_innovation() {
    let track = track_at(Vector3::new(0.0, 0.0, 3.0), 1.0);
    let j_h = Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let innovation = Vector2::new(0.8, -0.6);
    let (x, _, _) = kalman_update(&track.x, &track.p, &innovation, &j_h, &(Matrix2::identity() * 1e-4)).unwrap();
    let residual = innovation - j_h * (x - track.x);
    assert!(residual.norm() * 10.0 < innovation.norm(), "residual {residual:?}");
}

#[test]
fn posterior_covariance_never_grows() {
    let track = track_at(Vector3::new(0.0, 0.0, 3.0), 0.7);
    let j_h = Matrix2x3::new(2.0, 0.1, -0.3, 0.0, 1.5, 0.4);
    for r in [1e-3, 0.1, 1.0, 10.0] {
        let (_, p, _) = kalman_update(&track.x, &track.p, &Vector2::zeros(), &j_h, &(Matrix2::identity() * r)).unwrap();
        assert!(p.trace() <= track.p.trace() + 1e-12, "r {r}: {}", p.trace());
    }
}

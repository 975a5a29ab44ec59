//! Independent reference implementations used as test oracles. Nothing here
//! calls the library's own exp/log or Jacobian code.

#![allow(dead_code)]

use jointtrack::camera::Intrinsics;
use jointtrack::simulator::{MotionSampler, Scenario, SceneSpec};
use jointtrack::{RigidMotion, Twist};
use nalgebra::{Matrix4, Vector3};

pub fn hat(twist: &Twist) -> Matrix4<f64> {
    let (t, p) = (twist.tau, twist.phi);
    Matrix4::new(
        0.0, -p.z, p.y, t.x, //
        p.z, 0.0, -p.x, t.y, //
        -p.y, p.x, 0.0, t.z, //
        0.0, 0.0, 0.0, 0.0,
    )
}

pub fn vee(m: &Matrix4<f64>) -> Twist {
    Twist::new(
        Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]),
        Vector3::new(
            0.5 * (m[(2, 1)] - m[(1, 2)]),
            0.5 * (m[(0, 2)] - m[(2, 0)]),
            0.5 * (m[(1, 0)] - m[(0, 1)]),
        ),
    )
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn matrix_exp(a: &Matrix4<f64>) -> Matrix4<f64> {
    let norm = a.abs().max();
    let squarings = if norm > 0.25 { (norm / 0.25).log2().ceil() as i32 } else { 0 };
    let x = a / 2f64.powi(squarings);
    let mut term = Matrix4::identity();
    let mut sum = Matrix4::identity();
    for n in 1..20 {
        term = term * x / n as f64;
        sum += term;
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    sum
}

/// Principal square root by the Denman-Beavers iteration.
fn matrix_sqrt(a: &Matrix4<f64>) -> Matrix4<f64> {
    let mut y = *a;
    let mut z = Matrix4::identity();
    for _ in 0..100 {
        let yi = y.try_inverse().expect("invertible");
        let zi = z.try_inverse().expect("invertible");
        let ny = 0.5 * (y + zi);
        let nz = 0.5 * (z + yi);
        let done = (ny - y).abs().max() < 1e-15;
        y = ny;
        z = nz;
        if done {
            break;
        }
    }
    y
}

/// Matrix logarithm by inverse scaling and squaring: repeated square roots until
/// the matrix is near the identity, then the Mercator series.
pub fn matrix_log(a: &Matrix4<f64>) -> Matrix4<f64> {
    let mut m = *a;
    let mut roots = 0;
    while (m - Matrix4::identity()).abs().max() > 1e-3 {
        m = matrix_sqrt(&m);
        roots += 1;
        assert!(roots < 60, "no convergence");
    }
    let x = m - Matrix4::identity();
    let mut power = x;
    let mut sum = Matrix4::zeros();
    for n in 1..16 {
        let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
        sum += power * (sign / n as f64);
        power *= x;
    }
    sum * 2f64.powi(roots)
}

/// Geodesic error `(mm, degrees)` of `estimate` against `truth` from 4x4 matrices.
pub fn oracle_geodesic(estimate: &RigidMotion, truth: &RigidMotion) -> (f64, f64) {
    let rel = truth.to_matrix() * estimate.to_matrix().try_inverse().expect("rigid");
    let xi = vee(&matrix_log(&rel));
    (xi.tau.norm(), xi.phi.norm().to_degrees())
}

pub fn small_intrinsics() -> Intrinsics {
    Intrinsics::new(200.0, 200.0, 80.0, 60.0, 160, 120).unwrap()
}

/// The default scene imaged at quarter resolution.
pub fn small_scenario(frames: usize, seed: u64) -> Scenario {
    let mut s = Scenario {
        scene: SceneSpec {
            intrinsics: small_intrinsics(),
            ..SceneSpec::default()
        },
        ..Scenario::default()
    };
    s.trajectory.frames = frames;
    s.trajectory.seed = seed;
    s
}

pub fn still_scenario(frames: usize) -> Scenario {
    let mut s = small_scenario(frames, 1);
    let still = MotionSampler {
        translation_mm: [0.0, 0.0],
        rotation_deg: [0.0, 0.0],
    };
    s.trajectory.patient = still.clone();
    s.trajectory.drill = still;
    s
}

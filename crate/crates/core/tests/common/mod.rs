#![allow(dead_code)]

use motionfield::trajectory::PoseTrajectory;
use motionfield::UnitQuaternion;
use nalgebra::{DVector, Vector3};
use std::path::PathBuf;

/// A 3-second reach in 3-D with an easing profile and a rotation about a
/// fixed axis that settles at the goal.
pub fn reach_demo(n: usize, dt: f64) -> PoseTrajectory {
    let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
    let end = times[n - 1];
    let s = |t: f64| 1.0 - (1.0 - t / end).powi(3);
    let positions = times
        .iter()
        .map(|t| {
            let u = s(*t);
            DVector::from_vec(vec![0.5 * (1.0 - u), 0.3 * (std::f64::consts::PI * u).sin(), 0.2 * (1.0 - u) * (1.0 - u)])
        })
        .collect();
    let axis = Vector3::new(0.2, 0.3, 1.0);
    let orientations = times.iter().map(|t| UnitQuaternion::from_axis_angle(&axis, 0.8 * (1.0 - s(*t)))).collect();
    PoseTrajectory::from_positions(times, positions, orientations).unwrap()
}

/// LASA root: `MOTIONFIELD_LASA_DIR`, else `data/lasa` when present, else
/// the bundled three-motion subset.
pub fn lasa_root() -> PathBuf {
    if let Ok(dir) = std::env::var("MOTIONFIELD_LASA_DIR") {
        return PathBuf::from(dir);
    }
    let full = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/lasa");
    if full.join("Angle").is_dir() {
        full
    } else {
        fixture_root()
    }
}

pub fn fixture_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/lasa_mini")
}

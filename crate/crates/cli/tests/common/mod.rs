#![allow(dead_code)]

use std::sync::OnceLock;

use motionfield::policy::{train_policy, TrainConfig};
use motionfield::{PoseTrajectory, Se3Policy, UnitQuaternion};
use nalgebra::{DVector, Vector3};

/// A 3-second reach with an easing profile and a rotation that settles at
/// the goal.
pub fn reach_demo() -> PoseTrajectory {
    let n = 300;
    let times: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
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

pub fn policy() -> Se3Policy {
    static JSON: OnceLock<String> = OnceLock::new();
    let text = JSON.get_or_init(|| train_policy(&reach_demo(), &TrainConfig::default()).unwrap().to_json().unwrap());
    Se3Policy::from_json(text).unwrap()
}

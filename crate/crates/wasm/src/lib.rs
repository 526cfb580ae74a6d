//! Browser bindings for a planar policy: sample its field, drag its goal and
//! roll it out around spherical obstacles.

use motionfield::bench::{export_field, FieldSample, Grid};
use motionfield::dslearn::{Rollout, RolloutConfig, Termination};
use motionfield::elastic::{adapt_to_target, Keypose};
use motionfield::policy::{train_policy, TrainConfig};
use motionfield::runtime::{rollout_modulated, validate_obstacles, SphereObstacle};
use motionfield::{Pose, PoseTrajectory, Se3Policy, UnitQuaternion};
use nalgebra::{DVector, Vector3};
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Result<T> = std::result::Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// A curling reach that ends at the origin, sampled at 100 Hz.
pub fn builtin_demo() -> PoseTrajectory {
    let n = 300;
    let dt = 0.01;
    let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
    let positions = (0..n)
        .map(|i| {
            let s = i as f64 / (n - 1) as f64;
            let u = s * s * (3.0 - 2.0 * s);
            let r = 0.65 * (1.0 - u);
            let a = 2.4 - 2.9 * u;
            DVector::from_vec(vec![r * a.cos(), r * a.sin() + 0.15 * (std::f64::consts::PI * u).sin() * (1.0 - u)])
        })
        .collect();
    PoseTrajectory::from_positions(times, positions, Vec::new()).expect("built-in demo is valid")
}

#[derive(Clone, Debug, Serialize)]
pub struct RolloutPath {
    pub points: Vec<[f64; 2]>,
    pub converged: bool,
    pub steps: usize,
}

impl From<Rollout> for RolloutPath {
    fn from(r: Rollout) -> Self {
        Self {
            points: r.trajectory.positions.iter().map(|p| [p[0], p[1]]).collect(),
            converged: r.termination == Termination::Converged,
            steps: r.steps,
        }
    }
}

/// Planar policy with its obstacle set. Adaptation always starts from the
/// trained policy.
pub struct Playground {
    policy: Se3Policy,
    demo: Vec<[f64; 2]>,
    obstacles: Vec<SphereObstacle>,
}

impl Playground {
    pub fn trained() -> Result<Self> {
        let demo = builtin_demo();
        let policy = train_policy(&demo, &TrainConfig::default()).map_err(err)?;
        Ok(Self { policy, demo: demo.positions.iter().map(|p| [p[0], p[1]]).collect(), obstacles: Vec::new() })
    }

    pub fn from_policy_json(text: &str) -> Result<Self> {
        let policy = Se3Policy::from_json(text).map_err(err)?;
        if policy.position().dim() != 2 {
            return Err(format!("the playground draws planar policies, got {}-D", policy.position().dim()));
        }
        Ok(Self { policy, demo: Vec::new(), obstacles: Vec::new() })
    }

    pub fn policy(&self) -> &Se3Policy {
        &self.policy
    }

    pub fn demo(&self) -> &[[f64; 2]] {
        &self.demo
    }

    pub fn attractor(&self) -> [f64; 2] {
        let a = self.policy.position().attractor();
        [a[0], a[1]]
    }

    pub fn field(&self, grid: &Grid) -> Result<FieldSample> {
        export_field(&self.policy, grid).map_err(err)
    }

    /// Moves the goal to `(x, y)` with heading `yaw` relative to the
    /// demonstrated one.
    pub fn adapt(&mut self, x: f64, y: f64, yaw: f64) -> Result<()> {
        let goal = self.policy.attractor();
        let object = Pose::new(DVector::from_vec(vec![x, y]), goal.orientation.compose(&UnitQuaternion::from_axis_angle(&Vector3::z(), yaw)));
        let keypose = Keypose { object_pose: object, key_offset: Pose::from_position(DVector::zeros(2)) };
        let target = keypose.target().map_err(err)?;
        let adapted = adapt_to_target(&self.policy, &target, None).map_err(err)?;
        validate_obstacles(&self.obstacles, adapted.position().attractor()).map_err(err)?;
        self.policy = adapted;
        Ok(())
    }

    pub fn add_obstacle(&mut self, x: f64, y: f64, radius: f64) -> Result<()> {
        let ob = SphereObstacle::new(DVector::from_vec(vec![x, y]), radius).map_err(err)?;
        validate_obstacles(std::slice::from_ref(&ob), self.policy.position().attractor()).map_err(err)?;
        self.obstacles.push(ob);
        Ok(())
    }

    pub fn clear_obstacles(&mut self) {
        self.obstacles.clear();
    }

    pub fn obstacles(&self) -> &[SphereObstacle] {
        &self.obstacles
    }

    pub fn rollout(&self, x: f64, y: f64, max_steps: usize) -> Result<RolloutPath> {
        let start = Pose::from_position(DVector::from_vec(vec![x, y]));
        if let Some(i) = self.obstacles.iter().position(|o| o.contains(&start.position)) {
            return Err(format!("start lies inside obstacle {i}"));
        }
        let config = RolloutConfig { max_steps, position_tolerance: 1e-3, ..RolloutConfig::default() };
        Ok(rollout_modulated(&self.policy, &start, &self.obstacles, &config).map_err(err)?.into())
    }
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

fn to_json<T: Serialize>(v: &T) -> std::result::Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub struct Demo(Playground);

#[wasm_bindgen]
impl Demo {
    /// Trains on the built-in demonstration.
    #[wasm_bindgen(constructor)]
    pub fn new() -> std::result::Result<Demo, JsError> {
        Playground::trained().map(Demo).map_err(js)
    }

    #[wasm_bindgen(js_name = fromPolicyJson)]
    pub fn from_policy_json(text: &str) -> std::result::Result<Demo, JsError> {
        Playground::from_policy_json(text).map(Demo).map_err(js)
    }

    /// Flattened `[x0, y0, x1, y1, ...]`.
    #[wasm_bindgen(js_name = demoPoints)]
    pub fn demo_points(&self) -> Vec<f64> {
        self.0.demo().iter().flatten().copied().collect()
    }

    pub fn attractor(&self) -> Vec<f64> {
        self.0.attractor().to_vec()
    }

    /// JSON field sample on an `nx` by `ny` grid.
    pub fn field(&self, xmin: f64, xmax: f64, ymin: f64, ymax: f64, nx: usize, ny: usize) -> std::result::Result<String, JsError> {
        let grid = Grid { mins: vec![xmin, ymin], maxs: vec![xmax, ymax], resolution: vec![nx, ny] };
        to_json(&self.0.field(&grid).map_err(js)?)
    }

    pub fn adapt(&mut self, x: f64, y: f64, yaw: f64) -> std::result::Result<(), JsError> {
        self.0.adapt(x, y, yaw).map_err(js)
    }

    #[wasm_bindgen(js_name = addObstacle)]
    pub fn add_obstacle(&mut self, x: f64, y: f64, radius: f64) -> std::result::Result<(), JsError> {
        self.0.add_obstacle(x, y, radius).map_err(js)
    }

    #[wasm_bindgen(js_name = clearObstacles)]
    pub fn clear_obstacles(&mut self) {
        self.0.clear_obstacles();
    }

    /// Flattened `[x, y, r, ...]`.
    pub fn obstacles(&self) -> Vec<f64> {
        self.0.obstacles().iter().flat_map(|o| [o.center[0], o.center[1], o.radius]).collect()
    }

    /// JSON `{points, converged, steps}`.
    pub fn rollout(&self, x: f64, y: f64, max_steps: usize) -> std::result::Result<String, JsError> {
        to_json(&self.0.rollout(x, y, max_steps).map_err(js)?)
    }

    #[wasm_bindgen(js_name = policyJson)]
    pub fn policy_json(&self) -> std::result::Result<String, JsError> {
        self.0.policy().to_json().map_err(|e| JsError::new(&e.to_string()))
    }
}

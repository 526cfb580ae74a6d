//! Online execution: obstacle modulation and multi-step task sequencing.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::dslearn::{integrate_orientation, rollout_with, Rollout, RolloutConfig};
use crate::manifold::{quat_log, UnitQuaternion};
use crate::policy::{Pose, Se3Policy};
use crate::trajectory::PoseTrajectory;
use crate::{Error, Result};

/// Relative slack under which a point on a sphere counts as on its surface.
const SURFACE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereObstacle {
    pub center: DVector<f64>,
    pub radius: f64,
    #[serde(default = "default_reactivity")]
    pub reactivity: f64,
}

fn default_reactivity() -> f64 {
    1.0
}

impl SphereObstacle {
    pub fn new(center: DVector<f64>, radius: f64) -> Result<Self> {
        Self::with_reactivity(center, radius, 1.0)
    }

    pub fn with_reactivity(center: DVector<f64>, radius: f64, reactivity: f64) -> Result<Self> {
        let ob = Self { center, radius, reactivity };
        ob.validate()?;
        Ok(ob)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::InvalidInput("obstacle radius must be positive".into()));
        }
        if !(self.reactivity > 0.0) || !self.reactivity.is_finite() {
            return Err(Error::InvalidInput("obstacle reactivity must be positive".into()));
        }
        if self.center.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("obstacle center must be finite".into()));
        }
        Ok(())
    }

    pub fn signed_distance(&self, x: &DVector<f64>) -> f64 {
        (x - &self.center).norm() - self.radius
    }

    /// `Γ(x) = (‖x − c‖ / r)²`
    pub fn gamma(&self, x: &DVector<f64>) -> f64 {
        (x - &self.center).norm_squared() / (self.radius * self.radius)
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.signed_distance(x) < 0.0
    }
}

/// Rejects obstacles of the wrong dimension or covering `attractor`.
pub fn validate_obstacles(obstacles: &[SphereObstacle], attractor: &DVector<f64>) -> Result<()> {
    for (i, ob) in obstacles.iter().enumerate() {
        ob.validate()?;
        if ob.center.len() != attractor.len() {
            return Err(Error::DimensionMismatch { expected: attractor.len(), got: ob.center.len() });
        }
        if ob.signed_distance(attractor) <= 0.0 {
            return Err(Error::InvalidInput(format!("obstacle {i} covers the attractor")));
        }
    }
    Ok(())
}

/// Per-obstacle weights of the multi-obstacle product. Obstacles whose
/// surface the point lies on take the full weight.
fn obstacle_weights(gammas: &[f64]) -> Vec<f64> {
    let excess: Vec<f64> = gammas.iter().map(|g| (g - 1.0).max(0.0)).collect();
    if excess.contains(&0.0) {
        return excess.iter().map(|e| if *e == 0.0 { 1.0 } else { 0.0 }).collect();
    }
    (0..excess.len())
        .map(|k| {
            (0..excess.len())
                .filter(|i| *i != k)
                .map(|i| excess[i] / (excess[k] + excess[i]))
                .product()
        })
        .collect()
}

/// Modulation matrix `M(x)`; the identity when there are no obstacles.
pub fn modulation_matrix(x: &DVector<f64>, obstacles: &[SphereObstacle]) -> Result<DMatrix<f64>> {
    let d = x.len();
    let mut gammas = Vec::with_capacity(obstacles.len());
    for (index, ob) in obstacles.iter().enumerate() {
        if ob.center.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: ob.center.len() });
        }
        let distance = ob.signed_distance(x);
        if distance < -SURFACE_TOLERANCE * ob.radius {
            return Err(Error::Penetration { index, distance });
        }
        gammas.push(ob.gamma(x).max(1.0));
    }
    let weights = obstacle_weights(&gammas);
    let mut m = DMatrix::identity(d, d);
    for ((ob, gamma), w) in obstacles.iter().zip(&gammas).zip(&weights) {
        if *w == 0.0 {
            continue;
        }
        let diff = x - &ob.center;
        let norm = diff.norm();
        if norm == 0.0 {
            continue;
        }
        let n = diff / norm;
        let s = w * gamma.powf(-1.0 / ob.reactivity);
        let (lambda_n, lambda_t) = (1.0 - s, 1.0 + s);
        let mk = DMatrix::identity(d, d) * lambda_t + &n * n.transpose() * (lambda_n - lambda_t);
        m = mk * m;
    }
    Ok(m)
}

/// `ẋ_new = M(x) ẋ`. Returns `xdot` unchanged when there are no obstacles.
pub fn modulate(xdot: &DVector<f64>, x: &DVector<f64>, obstacles: &[SphereObstacle]) -> Result<DVector<f64>> {
    if obstacles.is_empty() {
        if xdot.len() != x.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), got: xdot.len() });
        }
        return Ok(xdot.clone());
    }
    Ok(modulation_matrix(x, obstacles)? * xdot)
}

/// Largest `α ∈ [0, 1]` such that the segment `x + α s` stays outside every
/// obstacle.
pub fn admissible_fraction(x: &DVector<f64>, step: &DVector<f64>, obstacles: &[SphereObstacle]) -> f64 {
    let mut alpha = 1.0_f64;
    let a = step.norm_squared();
    if a == 0.0 {
        return alpha;
    }
    for ob in obstacles {
        let diff = x - &ob.center;
        let b = diff.dot(step);
        let c = diff.norm_squared() - ob.radius * ob.radius;
        if b >= 0.0 {
            continue;
        }
        let disc = b * b - a * c;
        if disc <= 0.0 {
            continue;
        }
        // Entry root, in the stable form.
        let root = c / (-b + disc.sqrt());
        if root < alpha {
            alpha = root.max(0.0);
        }
    }
    alpha
}

/// Euler rollout of the modulated field. Steps that would cross a sphere are
/// shortened to end on its surface.
pub fn rollout_modulated(policy: &Se3Policy, start: &Pose, obstacles: &[SphereObstacle], config: &RolloutConfig) -> Result<Rollout> {
    validate_obstacles(obstacles, policy.position().attractor())?;
    let dt = config.dt.unwrap_or(policy.dt());
    rollout_with(policy, start, config, |x, v| {
        let v = modulate(&v, x, obstacles)?;
        let alpha = admissible_fraction(x, &(&v * dt), obstacles);
        Ok(v * alpha)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskEventKind {
    SegmentComplete,
    TaskComplete,
    Gripper,
}

/// One line of the event log: `{"t", "type", "segment_index"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEvent {
    pub t: f64,
    #[serde(rename = "type")]
    pub kind: TaskEventKind,
    pub segment_index: usize,
}

pub fn write_events_jsonl<W: Write>(events: &[TaskEvent], mut out: W) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    #[serde(with = "crate::policy::dvector_as_vec")]
    pub linear: DVector<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn zero(dim: usize) -> Self {
        Self { linear: DVector::zeros(dim), angular: Vector3::zeros() }
    }

    pub fn is_zero(&self) -> bool {
        self.linear.iter().all(|v| *v == 0.0) && self.angular == Vector3::zeros()
    }
}

#[derive(Clone, Debug)]
pub struct TaskSegment {
    pub policy: Arc<Se3Policy>,
    /// Toggle the gripper when this segment completes.
    pub gripper: bool,
}

/// Progress snapshot, cheap to copy out for readers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskProgress {
    pub active: usize,
    pub complete: bool,
    pub gripper_closed: bool,
}

/// Ordered policies with one-hot activation. Reaching the active attractor
/// within tolerance advances to the next segment.
#[derive(Clone, Debug)]
pub struct TaskSequence {
    segments: Vec<TaskSegment>,
    obstacles: Vec<SphereObstacle>,
    pub position_tolerance: f64,
    /// Geodesic distance on S^3, as in rollouts.
    pub orientation_tolerance: f64,
    progress: TaskProgress,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStep {
    pub twist: Twist,
    pub events: Vec<TaskEvent>,
    /// Segment whose policy produced `twist`.
    pub active_segment: usize,
}

impl TaskSequence {
    pub fn new(segments: Vec<TaskSegment>) -> Result<Self> {
        let Some(first) = segments.first() else {
            return Err(Error::InvalidInput("a task needs at least one segment".into()));
        };
        let d = first.policy.position().dim();
        if segments.iter().any(|s| s.policy.position().dim() != d) {
            return Err(Error::InvalidInput("task segments differ in dimension".into()));
        }
        Ok(Self {
            segments,
            obstacles: Vec::new(),
            position_tolerance: 5e-3,
            orientation_tolerance: 0.05,
            progress: TaskProgress { active: 0, complete: false, gripper_closed: false },
        })
    }

    pub fn single(policy: Arc<Se3Policy>) -> Self {
        Self::new(vec![TaskSegment { policy, gripper: false }]).expect("one segment")
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> &[TaskSegment] {
        &self.segments
    }

    pub fn progress(&self) -> TaskProgress {
        self.progress
    }

    pub fn active(&self) -> usize {
        self.progress.active
    }

    /// `δ(ξ)`
    pub fn activation(&self) -> Vec<bool> {
        (0..self.segments.len()).map(|i| i == self.progress.active).collect()
    }

    pub fn active_policy(&self) -> &Arc<Se3Policy> {
        &self.segments[self.progress.active].policy
    }

    pub fn obstacles(&self) -> &[SphereObstacle] {
        &self.obstacles
    }

    /// Registers an obstacle; rejected when it covers any segment attractor.
    pub fn add_obstacle(&mut self, obstacle: SphereObstacle) -> Result<()> {
        for s in &self.segments {
            validate_obstacles(std::slice::from_ref(&obstacle), s.policy.position().attractor())?;
        }
        self.obstacles.push(obstacle);
        Ok(())
    }

    pub fn clear_obstacles(&mut self) {
        self.obstacles.clear();
    }

    /// Swaps the policy of one segment (for example after adaptation).
    pub fn replace_policy(&mut self, index: usize, policy: Arc<Se3Policy>) -> Result<()> {
        let d = self.segments[0].policy.position().dim();
        let Some(seg) = self.segments.get_mut(index) else {
            return Err(Error::InvalidInput(format!("no segment {index}")));
        };
        if policy.position().dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: policy.position().dim() });
        }
        for ob in &self.obstacles {
            validate_obstacles(std::slice::from_ref(ob), policy.position().attractor())?;
        }
        seg.policy = policy;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.progress = TaskProgress { active: 0, complete: false, gripper_closed: false };
    }

    fn reached(&self, index: usize, pose: &Pose) -> bool {
        let policy = &self.segments[index].policy;
        let position_error = (&pose.position - policy.position().attractor()).norm();
        let orientation_error = policy.orientation().map_or(0.0, |o| quat_log(&o.attractor(), &pose.orientation).norm());
        position_error < self.position_tolerance && orientation_error < self.orientation_tolerance
    }

    fn twist(&self, index: usize, pose: &Pose) -> Result<Twist> {
        let policy = &self.segments[index].policy;
        let linear = modulate(&policy.position().velocity(&pose.position), &pose.position, &self.obstacles)?;
        let angular = match policy.orientation() {
            Some(o) => o.angular_velocity(&pose.orientation, policy.dt())?,
            None => Vector3::zeros(),
        };
        Ok(Twist { linear, angular })
    }
}

/// One control tick at time `t`.
pub fn step_task(seq: &mut TaskSequence, pose: &Pose, t: f64) -> Result<TaskStep> {
    let d = seq.segments[0].policy.position().dim();
    if pose.position.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: pose.position.len() });
    }
    let mut events = Vec::new();
    if seq.progress.complete {
        return Ok(TaskStep { twist: Twist::zero(d), events, active_segment: seq.progress.active });
    }
    let index = seq.progress.active;
    if seq.reached(index, pose) {
        events.push(TaskEvent { t, kind: TaskEventKind::SegmentComplete, segment_index: index });
        if seq.segments[index].gripper {
            seq.progress.gripper_closed = !seq.progress.gripper_closed;
            events.push(TaskEvent { t, kind: TaskEventKind::Gripper, segment_index: index });
        }
        if index + 1 == seq.segments.len() {
            seq.progress.complete = true;
            events.push(TaskEvent { t, kind: TaskEventKind::TaskComplete, segment_index: index });
            return Ok(TaskStep { twist: Twist::zero(d), events, active_segment: index });
        }
        seq.progress.active = index + 1;
    }
    let active = seq.progress.active;
    let twist = seq.twist(active, pose)?;
    Ok(TaskStep { twist, events, active_segment: active })
}

/// Applies a twist for `dt`, stopping position steps at obstacle surfaces.
pub fn apply_twist(pose: &Pose, twist: &Twist, dt: f64, obstacles: &[SphereObstacle]) -> Result<Pose> {
    let step = &twist.linear * dt;
    let alpha = admissible_fraction(&pose.position, &step, obstacles);
    Ok(Pose { position: &pose.position + step * alpha, orientation: integrate_orientation(&pose.orientation, &twist.angular, dt)? })
}

/// Closed-loop simulation of a task until completion or `max_steps`.
pub fn simulate_task(seq: &mut TaskSequence, start: &Pose, dt: f64, max_steps: usize) -> Result<(PoseTrajectory, Vec<TaskEvent>)> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput("dt must be positive".into()));
    }
    let mut pose = start.clone();
    let mut traj = PoseTrajectory::default();
    let mut events = Vec::new();
    for i in 0..max_steps {
        let t = i as f64 * dt;
        let step = step_task(seq, &pose, t)?;
        traj.times.push(t);
        traj.positions.push(pose.position.clone());
        traj.velocities.push(step.twist.linear.clone());
        traj.orientations.push(pose.orientation);
        events.extend(step.events);
        if seq.progress().complete {
            break;
        }
        pose = apply_twist(&pose, &step.twist, dt, seq.obstacles())?;
    }
    Ok((traj, events))
}

/// Splits `traj` after each boundary index. Segment `i` ends at sample
/// `boundaries[i]` (its attractor); the last segment ends at the final
/// sample. Segments are disjoint and concatenate to `traj`.
pub fn segment_demo(traj: &PoseTrajectory, boundaries: &[usize]) -> Result<Vec<PoseTrajectory>> {
    let n = traj.len();
    if n == 0 {
        return Err(Error::InvalidBoundaries("empty trajectory".into()));
    }
    let mut start = 0;
    let mut out = Vec::with_capacity(boundaries.len() + 1);
    for &b in boundaries {
        if b < start {
            return Err(Error::InvalidBoundaries(format!("boundary {b} would leave an empty segment")));
        }
        if b + 1 >= n {
            return Err(Error::InvalidBoundaries(format!("boundary {b} leaves no samples after it (length {n})")));
        }
        out.push(traj.slice(start..b + 1));
        start = b + 1;
    }
    out.push(traj.slice(start..n));
    Ok(out)
}

/// Final pose of each segment.
pub fn segment_attractors(segments: &[PoseTrajectory]) -> Vec<Pose> {
    segments
        .iter()
        .map(|s| {
            let orientation = s.orientations.last().copied().unwrap_or(UnitQuaternion::IDENTITY);
            Pose::new(s.positions[s.len() - 1].clone(), orientation)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn no_obstacles_is_identity() {
        let xd = v(&[0.3, -1.2, 4.0]);
        assert_eq!(modulate(&xd, &v(&[1.0, 2.0, 3.0]), &[]).unwrap(), xd);
    }

    #[test]
    fn boundary_kills_inward_normal_component() {
        let ob = SphereObstacle::new(v(&[1.0, 0.0, 0.0]), 0.5).unwrap();
        let x = v(&[1.0, 0.5, 0.0]);
        let out = modulate(&v(&[0.2, -3.0, 0.7]), &x, std::slice::from_ref(&ob)).unwrap();
        assert!(out[1].abs() < 1e-10);
        // Tangential components double.
        assert!((out[0] - 0.4).abs() < 1e-12 && (out[2] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn far_field_is_nearly_identity() {
        let ob = SphereObstacle::new(v(&[0.0, 0.0, 0.0]), 1.0).unwrap();
        let x = v(&[1000.0, 0.0, 0.0]);
        let m = modulation_matrix(&x, &[ob]).unwrap();
        assert!((m - DMatrix::<f64>::identity(3, 3)).norm() < 1e-3);
    }

    #[test]
    fn penetration_is_an_error() {
        let ob = SphereObstacle::new(v(&[0.0, 0.0]), 1.0).unwrap();
        let err = modulate(&v(&[1.0, 0.0]), &v(&[0.2, 0.1]), &[ob]).unwrap_err();
        assert!(matches!(err, Error::Penetration { index: 0, .. }));
    }

    #[test]
    fn two_obstacles_reduce_to_the_touched_one_on_its_surface() {
        let a = SphereObstacle::new(v(&[0.0, 0.0]), 1.0).unwrap();
        let b = SphereObstacle::new(v(&[5.0, 0.0]), 1.0).unwrap();
        let x = v(&[0.0, 1.0]);
        let both = modulate(&v(&[0.5, -2.0]), &x, &[a.clone(), b]).unwrap();
        let one = modulate(&v(&[0.5, -2.0]), &x, &[a]).unwrap();
        assert_eq!(both, one);
        assert!(both[1].abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_one_for_two() {
        let w = obstacle_weights(&[3.0, 7.0]);
        assert!((w[0] + w[1] - 1.0).abs() < 1e-15);
        assert!(w[0] > w[1]);
    }

    #[test]
    fn admissible_fraction_stops_on_surface() {
        let ob = SphereObstacle::new(v(&[0.0, 0.0]), 1.0).unwrap();
        let x = v(&[-3.0, 0.0]);
        let alpha = admissible_fraction(&x, &v(&[4.0, 0.0]), std::slice::from_ref(&ob));
        assert!((alpha - 0.5).abs() < 1e-15);
        assert_eq!(admissible_fraction(&x, &v(&[-4.0, 0.0]), &[ob]), 1.0);
    }

    #[test]
    fn segments_partition_the_demo() {
        let n = 20;
        let times: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let positions: Vec<DVector<f64>> = (0..n).map(|i| v(&[i as f64, 0.0])).collect();
        let traj = PoseTrajectory::from_positions(times, positions, Vec::new()).unwrap();
        let one = segment_demo(&traj, &[]).unwrap();
        assert_eq!(one, vec![traj.clone()]);
        let two = segment_demo(&traj, &[n / 2]).unwrap();
        assert_eq!(two.len(), 2);
        let joined: Vec<_> = two.iter().flat_map(|s| s.positions.clone()).collect();
        assert_eq!(joined, traj.positions);
        let att = segment_attractors(&two);
        assert_eq!(att[0].position, traj.positions[n / 2]);
        assert_eq!(att[1].position, traj.positions[n - 1]);
        assert!(matches!(segment_demo(&traj, &[5, 5]), Err(Error::InvalidBoundaries(_))));
        assert!(matches!(segment_demo(&traj, &[n - 1]), Err(Error::InvalidBoundaries(_))));
    }

    #[test]
    fn events_serialize_as_json_lines() {
        let events = vec![
            TaskEvent { t: 0.5, kind: TaskEventKind::SegmentComplete, segment_index: 0 },
            TaskEvent { t: 0.5, kind: TaskEventKind::Gripper, segment_index: 0 },
        ];
        let mut buf = Vec::new();
        write_events_jsonl(&events, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], r#"{"t":0.5,"type":"segment_complete","segment_index":0}"#);
        assert_eq!(serde_json::from_str::<TaskEvent>(lines[1]).unwrap(), events[1]);
    }

    #[test]
    fn modulated_normal_speed_is_bounded_near_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ob = SphereObstacle::new(v(&[0.0, 0.0, 0.0]), 1.0).unwrap();
        for _ in 0..200 {
            let dir = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)).normalize();
            let dist = rng.random_range(0.0..0.1);
            let x = &dir * (1.0 + dist);
            let xd = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let out = modulate(&xd, &x, std::slice::from_ref(&ob)).unwrap();
            let gamma = ob.gamma(&x);
            assert!((out.dot(&dir) - (1.0 - 1.0 / gamma) * xd.dot(&dir)).abs() < 1e-12);
        }
    }
}

//! One simulated policy loop shared by every connected client.
//!
//! The ticker is the only writer of the pose. Adaptation runs on its own
//! worker and swaps the finished policy in under the lock, so a tick never
//! waits for more than a swap.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, MutexGuard, Weak};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use motionfield::bench::export_field;
use motionfield::elastic::{adapt_policy, Keypose};
use motionfield::runtime::{apply_twist, step_task, SphereObstacle, TaskSequence, Twist};
use motionfield::{Pose, Se3Policy};

use crate::protocol::{parse_client_message, ClientMessage, ErrorCode, Frame, ObstacleState, ServerMessage};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SessionConfig {
    /// Frames per second.
    pub rate_hz: f64,
    /// The watchdog pauses the simulation when the pose leaves this many
    /// data radii around the active attractor.
    pub divergence_factor: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { rate_hz: 30.0, divergence_factor: 1e3 }
    }
}

struct Sim {
    seq: TaskSequence,
    pose: Pose,
    t: f64,
    paused: bool,
}

struct AdaptJob {
    segment: usize,
    pose: Pose,
}

pub struct Session {
    config: SessionConfig,
    sim: Mutex<Sim>,
    subscribers: Mutex<Vec<Sender<String>>>,
    jobs: Mutex<Sender<AdaptJob>>,
}

impl Session {
    /// Places the simulated pose at `start` and spawns the adaptation
    /// worker, which lives as long as the session.
    pub fn new(seq: TaskSequence, start: Pose, config: SessionConfig) -> motionfield::Result<Arc<Self>> {
        let d = seq.segments()[0].policy.position().dim();
        if start.position.len() != d {
            return Err(motionfield::Error::DimensionMismatch { expected: d, got: start.position.len() });
        }
        if !(config.rate_hz > 0.0 && config.rate_hz.is_finite()) {
            return Err(motionfield::Error::InvalidInput("tick rate must be positive".into()));
        }
        let (tx, rx) = mpsc::channel();
        let session = Arc::new(Self {
            config,
            sim: Mutex::new(Sim { seq, pose: start, t: 0.0, paused: false }),
            subscribers: Mutex::new(Vec::new()),
            jobs: Mutex::new(tx),
        });
        let weak = Arc::downgrade(&session);
        std::thread::Builder::new()
            .name("adaptation".into())
            .spawn(move || adaptation_worker(weak, rx))
            .expect("spawn adaptation worker");
        Ok(session)
    }

    /// Single-policy session starting at `start`.
    pub fn single(policy: Se3Policy, start: Pose, config: SessionConfig) -> motionfield::Result<Arc<Self>> {
        Self::new(TaskSequence::single(Arc::new(policy)), start, config)
    }

    pub fn config(&self) -> SessionConfig {
        self.config
    }

    fn sim(&self) -> MutexGuard<'_, Sim> {
        self.sim.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn active_policy(&self) -> Arc<Se3Policy> {
        self.sim().seq.active_policy().clone()
    }

    pub fn pose(&self) -> Pose {
        self.sim().pose.clone()
    }

    /// Receives every broadcast message as JSON text.
    pub fn subscribe(&self) -> Receiver<String> {
        let (tx, rx) = mpsc::channel();
        self.subscribers.lock().unwrap_or_else(|e| e.into_inner()).push(tx);
        rx
    }

    pub fn broadcast(&self, msg: &ServerMessage) {
        let text = msg.to_json();
        self.subscribers.lock().unwrap_or_else(|e| e.into_inner()).retain(|tx| tx.send(text.clone()).is_ok());
    }

    /// Handles one client message. Returns the reply owed to the sender, if
    /// any; adaptation results are broadcast once the worker finishes.
    pub fn handle_text(&self, text: &str) -> Option<ServerMessage> {
        match parse_client_message(text) {
            Ok(msg) => self.handle(msg),
            Err(e) => Some(ServerMessage::error(ErrorCode::Malformed, e.to_string())),
        }
    }

    pub fn handle(&self, msg: ClientMessage) -> Option<ServerMessage> {
        let rejected = |e: motionfield::Error| Some(ServerMessage::error(ErrorCode::Rejected, e.to_string()));
        match msg {
            ClientMessage::SetKeypose { pose } => {
                let sim = self.sim();
                if let Err(e) = check_dim(&sim, &pose) {
                    return rejected(e);
                }
                let job = AdaptJob { segment: sim.seq.active(), pose };
                drop(sim);
                if self.jobs.lock().unwrap_or_else(|e| e.into_inner()).send(job).is_err() {
                    return Some(ServerMessage::error(ErrorCode::AdaptationFailed, "adaptation worker stopped"));
                }
                None
            }
            ClientMessage::SetObstacle { center, radius } => {
                let mut sim = self.sim();
                let obstacle = match SphereObstacle::new(center.into(), radius) {
                    Ok(o) => o,
                    Err(e) => return rejected(e),
                };
                if obstacle.center.len() == sim.pose.position.len() && obstacle.contains(&sim.pose.position) {
                    return Some(ServerMessage::error(ErrorCode::Rejected, "obstacle would contain the current pose"));
                }
                sim.seq.add_obstacle(obstacle).err().and_then(rejected)
            }
            ClientMessage::ClearObstacles => {
                self.sim().seq.clear_obstacles();
                None
            }
            ClientMessage::SetStart { pose } => {
                let mut sim = self.sim();
                if let Err(e) = check_dim(&sim, &pose) {
                    return rejected(e);
                }
                if let Some(i) = sim.seq.obstacles().iter().position(|o| o.contains(&pose.position)) {
                    return Some(ServerMessage::error(ErrorCode::Rejected, format!("start lies inside obstacle {i}")));
                }
                sim.pose = pose;
                sim.seq.reset();
                sim.paused = false;
                None
            }
            ClientMessage::RequestField { grid } => {
                let policy = self.active_policy();
                Some(match export_field(&policy, &grid) {
                    Ok(sample) => ServerMessage::Field(sample),
                    Err(e) => ServerMessage::error(ErrorCode::Rejected, e.to_string()),
                })
            }
        }
    }

    /// Reports the current state and then advances the simulation by one
    /// frame period in policy-sized Euler steps.
    pub fn tick(&self) -> Frame {
        let mut sim = self.sim();
        let sim = &mut *sim;
        let d = sim.pose.position.len();
        let reported = sim.pose.clone();
        let mut frame = Frame {
            t: sim.t,
            pose: reported.clone(),
            twist: Twist::zero(d),
            active_segment: sim.seq.active(),
            events: Vec::new(),
            lyapunov_value: sim.seq.active_policy().lyapunov().value(&reported.position),
            attractor: sim.seq.active_policy().attractor(),
            obstacles: sim.seq.obstacles().iter().map(|o| ObstacleState { center: o.center.as_slice().to_vec(), radius: o.radius }).collect(),
            complete: sim.seq.progress().complete,
            paused: sim.paused,
            fault: None,
        };
        if sim.paused {
            return frame;
        }
        let dt = sim.seq.active_policy().dt();
        let substeps = ((1.0 / self.config.rate_hz) / dt).round().max(1.0) as usize;
        for i in 0..substeps {
            let step = match step_task(&mut sim.seq, &sim.pose, sim.t) {
                Ok(s) => s,
                Err(e) => {
                    fault(sim, &mut frame, e.to_string());
                    break;
                }
            };
            if i == 0 {
                frame.twist = step.twist.clone();
                frame.active_segment = step.active_segment;
            }
            frame.events.extend(step.events);
            if sim.seq.progress().complete {
                break;
            }
            match apply_twist(&sim.pose, &step.twist, dt, sim.seq.obstacles()) {
                Ok(next) => sim.pose = next,
                Err(e) => {
                    fault(sim, &mut frame, e.to_string());
                    break;
                }
            }
            sim.t += dt;
            let policy = sim.seq.active_policy();
            let distance = (&sim.pose.position - policy.position().attractor()).norm();
            let limit = self.config.divergence_factor * policy.position().radius().max(f64::MIN_POSITIVE);
            if !distance.is_finite() || distance > limit {
                fault(sim, &mut frame, format!("pose left the workspace (distance {distance:e})"));
                break;
            }
        }
        frame.complete = sim.seq.progress().complete;
        frame
    }

    /// Ticks at the configured rate and broadcasts each frame until `stop`
    /// is set. Deadlines are absolute, so a late frame does not shift the
    /// ones after it.
    pub fn spawn_ticker(self: &Arc<Self>, stop: Arc<AtomicBool>) -> JoinHandle<()> {
        let session = self.clone();
        std::thread::Builder::new()
            .name("ticker".into())
            .spawn(move || {
                let period = Duration::from_secs_f64(1.0 / session.config.rate_hz);
                let mut next = Instant::now();
                while !stop.load(Ordering::Relaxed) {
                    let frame = session.tick();
                    session.broadcast(&ServerMessage::Frame(frame));
                    next += period;
                    let now = Instant::now();
                    if next > now {
                        std::thread::sleep(next - now);
                    } else {
                        next = now;
                    }
                }
            })
            .expect("spawn ticker")
    }

    fn adapt(&self, job: AdaptJob) -> ServerMessage {
        let policy = {
            let sim = self.sim();
            match sim.seq.segments().get(job.segment) {
                Some(s) => s.policy.clone(),
                None => return ServerMessage::error(ErrorCode::AdaptationFailed, format!("no segment {}", job.segment)),
            }
        };
        let keypose = Keypose { object_pose: job.pose.clone(), key_offset: Pose::from_position(nalgebra::DVector::zeros(job.pose.position.len())) };
        let start = Instant::now();
        let adapted = match adapt_policy(&policy, &keypose, None) {
            Ok(p) => Arc::new(p),
            Err(e) => return ServerMessage::error(ErrorCode::AdaptationFailed, e.to_string()),
        };
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        let attractor = adapted.attractor();
        match self.sim().seq.replace_policy(job.segment, adapted) {
            Ok(()) => ServerMessage::Adapted { latency_ms, segment: job.segment, attractor },
            Err(e) => ServerMessage::error(ErrorCode::AdaptationFailed, e.to_string()),
        }
    }
}

fn check_dim(sim: &Sim, pose: &Pose) -> motionfield::Result<()> {
    let d = sim.pose.position.len();
    if pose.position.len() != d {
        return Err(motionfield::Error::DimensionMismatch { expected: d, got: pose.position.len() });
    }
    if pose.position.iter().any(|v| !v.is_finite()) {
        return Err(motionfield::Error::InvalidInput("non-finite position".into()));
    }
    Ok(())
}

fn fault(sim: &mut Sim, frame: &mut Frame, detail: String) {
    sim.paused = true;
    frame.paused = true;
    frame.fault = Some(detail);
}

/// Runs queued adaptations. When several requests are waiting only the most
/// recent one per segment matters, so the older ones are dropped.
fn adaptation_worker(session: Weak<Session>, jobs: Receiver<AdaptJob>) {
    while let Ok(first) = jobs.recv() {
        let mut batch = vec![first];
        batch.extend(jobs.try_iter());
        let mut latest: Vec<AdaptJob> = Vec::new();
        for job in batch {
            latest.retain(|j| j.segment != job.segment);
            latest.push(job);
        }
        let Some(session) = session.upgrade() else { return };
        for job in latest {
            let reply = session.adapt(job);
            session.broadcast(&reply);
        }
    }
}

//! JSON messages exchanged with playground clients. Every message carries a
//! `"type"` tag.

use motionfield::bench::{FieldSample, Grid};
use motionfield::runtime::{TaskEvent, Twist};
use motionfield::Pose;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    /// New goal pose for the active segment.
    SetKeypose { pose: Pose },
    SetObstacle { center: Vec<f64>, radius: f64 },
    ClearObstacles,
    /// Moves the simulated pose and restarts the task.
    SetStart { pose: Pose },
    RequestField { grid: Grid },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleState {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// Simulation time in seconds.
    pub t: f64,
    pub pose: Pose,
    pub twist: Twist,
    pub active_segment: usize,
    pub events: Vec<TaskEvent>,
    /// Lyapunov value of the active segment at `pose`.
    pub lyapunov_value: f64,
    pub attractor: Pose,
    pub obstacles: Vec<ObstacleState>,
    pub complete: bool,
    pub paused: bool,
    /// Set on the frame that paused the simulation.
    pub fault: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Frame(Frame),
    Field(FieldSample),
    Adapted { latency_ms: f64, segment: usize, attractor: Pose },
    Error { code: ErrorCode, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Not JSON, or not a known message.
    Malformed,
    /// Well formed but rejected (bad dimension, obstacle covering the goal, ...).
    Rejected,
    AdaptationFailed,
}

impl ServerMessage {
    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        ServerMessage::Error { code, detail: detail.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

pub fn parse_client_message(text: &str) -> serde_json::Result<ClientMessage> {
    serde_json::from_str(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_examples_parse() {
        let m = parse_client_message(r#"{"type":"set_keypose","pose":{"pos":[0.1,0.2,0.3],"quat":[1,0,0,0]}}"#).unwrap();
        assert!(matches!(m, ClientMessage::SetKeypose { ref pose } if pose.position.len() == 3));
        let m = parse_client_message(r#"{"type":"set_obstacle","center":[0,0,0.1],"radius":0.05}"#).unwrap();
        assert_eq!(m, ClientMessage::SetObstacle { center: vec![0.0, 0.0, 0.1], radius: 0.05 });
        assert_eq!(parse_client_message(r#"{"type":"clear_obstacles"}"#).unwrap(), ClientMessage::ClearObstacles);
        let m = parse_client_message(r#"{"type":"request_field","grid":{"mins":[0,0],"maxs":[1,1],"resolution":[3,3]}}"#).unwrap();
        assert!(matches!(m, ClientMessage::RequestField { .. }));
    }

    #[test]
    fn orientation_defaults_to_identity() {
        let m = parse_client_message(r#"{"type":"set_start","pose":{"pos":[1,2]}}"#).unwrap();
        let ClientMessage::SetStart { pose } = m else { panic!() };
        assert_eq!(pose.orientation.coords().as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn garbage_is_malformed() {
        for text in ["", "{", "[]", r#"{"type":"fly"}"#, r#"{"type":"set_obstacle","center":[0]}"#] {
            assert!(parse_client_message(text).is_err(), "{text}");
        }
    }

    #[test]
    fn errors_serialize_with_code_and_detail() {
        let text = ServerMessage::error(ErrorCode::Rejected, "no").to_json();
        assert_eq!(text, r#"{"type":"error","code":"rejected","detail":"no"}"#);
    }
}

mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use motionfield::{Pose, UnitQuaternion};
use motionfield_cli::protocol::ClientMessage;
use motionfield_cli::session::{Session, SessionConfig};
use nalgebra::{DVector, Vector3};

#[test]
fn adaptation_storm_does_not_stall_the_ticker() {
    let demo = common::reach_demo();
    let start = Pose::new(demo.positions[0].clone(), demo.orientations[0]);
    let session = Session::single(common::policy(), start, SessionConfig { rate_hz: 30.0, ..SessionConfig::default() }).unwrap();
    let goal = session.active_policy().attractor();
    let rx = session.subscribe();
    let stop = Arc::new(AtomicBool::new(false));
    let ticker = session.spawn_ticker(stop.clone());

    let reader = std::thread::spawn(move || {
        let mut frames = Vec::new();
        let mut adapted = 0;
        let until = Instant::now() + Duration::from_secs(3);
        while let Ok(text) = rx.recv_timeout(until.saturating_duration_since(Instant::now())) {
            if text.starts_with("{\"type\":\"frame\"") {
                frames.push(Instant::now());
            } else if text.starts_with("{\"type\":\"adapted\"") {
                adapted += 1;
            }
        }
        (frames, adapted)
    });

    for i in 0..40 {
        let a = i as f64 / 40.0;
        let pose = Pose::new(
            &goal.position + DVector::from_vec(vec![0.05 * (5.0 * a).sin(), 0.04 * a, -0.03 * a]),
            goal.orientation.compose(&UnitQuaternion::from_axis_angle(&Vector3::new(0.0, 1.0, a), 0.3 * a)),
        );
        assert_eq!(session.handle(ClientMessage::SetKeypose { pose }), None);
        std::thread::sleep(Duration::from_millis(25));
    }
    let (frames, adapted) = reader.join().unwrap();
    stop.store(true, Ordering::Relaxed);
    ticker.join().unwrap();

    let gaps: Vec<f64> = frames.windows(2).map(|w| (w[1] - w[0]).as_secs_f64() * 1e3).collect();
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    println!("{} frames, {adapted} adaptations, worst gap {worst:.1} ms", frames.len());
    assert!(frames.len() >= 60, "{} frames in 3 s", frames.len());
    assert!(adapted >= 1);
    assert!(worst <= 100.0, "frame gap {worst:.1} ms");
}

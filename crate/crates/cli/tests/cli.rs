mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn motionfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motionfield")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = motionfield(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/lasa_mini")
}

#[test]
fn train_adapt_rollout_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let demo = dir.path().join("demo.csv");
    common::reach_demo().write_csv(std::fs::File::create(&demo).unwrap()).unwrap();
    let policy = dir.path().join("policy.json");
    let log = ok(&["train", "--demo", s(&demo), "--out", s(&policy)]);
    assert!(log.contains("3-D policy"), "{log}");

    let adapted = dir.path().join("adapted.json");
    ok(&["adapt", "--policy", s(&policy), "--target", "0.05,-0.04,0.03", "--out", s(&adapted)]);
    let bundle: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&adapted).unwrap()).unwrap();
    assert!(bundle.is_object());

    let traj = dir.path().join("rollout.csv");
    let log = ok(&["rollout", "--policy", s(&adapted), "--start", "0.5,0,0.2", "--max-steps", "20000", "--out", s(&traj)]);
    assert!(log.contains("Converged"), "{log}");
    let text = std::fs::read_to_string(&traj).unwrap();
    let last: Vec<f64> = text.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let end = (last[1] - 0.05).hypot(last[2] + 0.04).hypot(last[3] - 0.03);
    assert!(end < 1e-3, "ended {end} from the goal");

    let around = dir.path().join("around.csv");
    let log = ok(&[
        "rollout", "--policy", s(&policy), "--start", "0.5,0,0.2", "--obstacle", "0.35,0.2,0.12,0.04", "--max-steps", "20000", "--out",
        s(&around),
    ]);
    assert!(log.contains("Converged"), "{log}");

    let field = dir.path().join("field.csv");
    ok(&[
        "export-field", "--policy", s(&policy), "--mins", "-0.1,-0.1,-0.1", "--maxs", "0.6,0.4,0.3", "--resolution", "5,4,3", "--out",
        s(&field),
    ]);
    let text = std::fs::read_to_string(&field).unwrap();
    assert_eq!(text.lines().next(), Some("x,y,z,vx,vy,vz,V,Vdot"));
    assert_eq!(text.lines().count(), 61);
}

#[test]
fn bench_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let log = ok(&[
            "bench-lasa", "--data", s(&fixture()), "--protocol", "all", "--trials", "1", "--seed", "5", "--no-timing", "--out", s(&out),
        ]);
        assert!(log.contains("convex") && log.contains("gmm"), "{log}");
        std::fs::read(out).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("motion,method,trial,trajectory,time_seconds,violation_fraction,p,error\n"));
    assert_eq!(text.lines().count(), 1 + 3 * 2);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = motionfield(&["bench-lasa", "--data", s(dir.path()), "--out", s(&dir.path().join("r.csv"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let out = motionfield(&["bench-lasa", "--protocol", "some", "--out", "x.csv"]);
    assert!(!out.status.success());

    let missing = motionfield(&["rollout", "--policy", "/nonexistent.json", "--start", "0,0", "--out", "x.csv"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent.json"));
}

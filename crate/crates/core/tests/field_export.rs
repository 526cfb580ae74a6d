mod common;

use motionfield::bench::{export_field, load_lasa, Grid, GRID_CELL_LIMIT};
use motionfield::policy::{train_policy, train_position_policy, TrainConfig};
use motionfield::{Error, Se3Policy};
use nalgebra::DVector;

fn arc_policy() -> (Se3Policy, Vec<DVector<f64>>) {
    let motion = load_lasa(&common::fixture_root()).unwrap().into_iter().find(|m| m.name == "Arc").unwrap();
    let policy = train_position_policy(&motion.trajectories, &motion.attractor, &TrainConfig::default()).unwrap();
    (policy, motion.positions())
}

/// Convex hull of planar points, counterclockwise.
fn hull(points: &[DVector<f64>]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.iter().map(|p| [p[0], p[1]]).collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn inside(hull: &[[f64; 2]], p: &[f64]) -> bool {
    (0..hull.len()).all(|i| {
        let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
    })
}

fn data_grid(points: &[DVector<f64>], resolution: usize) -> Grid {
    // Symmetric about the attractor (the origin) so the middle node sits on it.
    let w: f64 = points.iter().map(|p| p.amax()).fold(0.0, f64::max) * 1.05;
    Grid { mins: vec![-w, -w], maxs: vec![w, w], resolution: vec![resolution, resolution] }
}

#[test]
fn exported_field_is_a_certified_descent_field() {
    let (policy, points) = arc_policy();
    assert_eq!(policy.attractor().position, DVector::zeros(2));
    let grid = data_grid(&points, 81);
    let sample = export_field(&policy, &grid).unwrap();
    assert_eq!(sample.points.len(), 81 * 81);

    let center = 40 * 81 + 40;
    assert_eq!(sample.points[center], vec![0.0, 0.0]);
    assert!(sample.velocities[center].iter().all(|v| *v == 0.0));
    assert_eq!(sample.values[center], 0.0);
    assert!(sample.values.iter().all(|v| *v >= 0.0));

    let h = hull(&points);
    let in_hull: Vec<usize> = (0..sample.points.len()).filter(|i| *i != center && inside(&h, &sample.points[*i])).collect();
    assert!(in_hull.len() > 100);
    let descending = in_hull.iter().filter(|i| sample.rates[**i] < 0.0).count();
    assert!(descending as f64 > 0.99 * in_hull.len() as f64, "{descending}/{}", in_hull.len());
}

#[test]
fn export_is_deterministic_and_has_a_header() {
    let (policy, points) = arc_policy();
    let grid = data_grid(&points, 17);
    let write = || {
        let mut buf = Vec::new();
        export_field(&policy, &grid).unwrap().write_csv(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    };
    let text = write();
    assert_eq!(text, write());
    assert_eq!(text.lines().next(), Some("x,y,vx,vy,V,Vdot"));
    assert_eq!(text.lines().count(), 1 + 17 * 17);
}

#[test]
fn oversize_grids_are_refused() {
    let (policy, _) = arc_policy();
    let grid = Grid { mins: vec![-1.0, -1.0], maxs: vec![1.0, 1.0], resolution: vec![1001, 1000] };
    match export_field(&policy, &grid) {
        Err(Error::GridLimit { cells, limit }) => assert_eq!((cells, limit), (1_001_000, GRID_CELL_LIMIT)),
        other => panic!("expected a grid limit error, got {:?}", other.map(|s| s.points.len())),
    }
    let wrong_dim = Grid { mins: vec![0.0; 3], maxs: vec![1.0; 3], resolution: vec![4; 3] };
    assert!(export_field(&policy, &wrong_dim).is_err());
}

#[test]
fn three_dimensional_policies_export_on_a_volume() {
    let policy = train_policy(&common::reach_demo(300, 0.01), &TrainConfig::default()).unwrap();
    let grid = Grid { mins: vec![-0.1, -0.1, -0.1], maxs: vec![0.6, 0.4, 0.3], resolution: vec![8, 6, 5] };
    let sample = export_field(&policy, &grid).unwrap();
    assert_eq!(sample.points.len(), 240);
    assert!(sample.points.iter().all(|p| p.len() == 3));
    assert!(sample.rates.iter().all(|r| *r <= 0.0));
    let mut buf = Vec::new();
    sample.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("x,y,z,vx,vy,vz,V,Vdot\n"));
}

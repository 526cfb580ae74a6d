//! LASA ingestion, the P-QLF benchmark and vector-field export.
//!
//! LASA is read from one CSV per trajectory (`t,x,y,vx,vy`) laid out as
//! `<root>/<Motion>/demo_<i>.csv`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lyapunov::{default_epsilon, solve_pqlf, violation_fraction, GmmSummary, LyapunovP, PqlfConfig};
use crate::mixture::{fit_position_gmm_with, GmmFitConfig};
use crate::policy::Se3Policy;
use crate::trajectory::PoseTrajectory;
use crate::{Error, Result};

pub const LASA_TRAJECTORIES: usize = 7;
pub const GRID_CELL_LIMIT: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct LasaMotion {
    pub name: String,
    pub trajectories: Vec<PoseTrajectory>,
    pub attractor: DVector<f64>,
}

impl LasaMotion {
    pub fn positions(&self) -> Vec<DVector<f64>> {
        self.trajectories.iter().flat_map(|t| t.positions.iter().cloned()).collect()
    }

    pub fn velocities(&self) -> Vec<DVector<f64>> {
        self.trajectories.iter().flat_map(|t| t.velocities.iter().cloned()).collect()
    }

    pub fn len(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LasaOptions {
    /// Translate every motion so its attractor is the origin.
    pub shift_to_origin: bool,
    pub trajectories_per_motion: usize,
    /// Largest distance between a trajectory's last sample and the common
    /// attractor.
    pub endpoint_tolerance: f64,
}

impl Default for LasaOptions {
    fn default() -> Self {
        Self { shift_to_origin: false, trajectories_per_motion: LASA_TRAJECTORIES, endpoint_tolerance: 1e-6 }
    }
}

pub fn load_lasa(root: &Path) -> Result<Vec<LasaMotion>> {
    load_lasa_with(root, &LasaOptions::default())
}

/// Loads every motion directory under `root`, sorted by name.
pub fn load_lasa_with(root: &Path, options: &LasaOptions) -> Result<Vec<LasaMotion>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    if names.is_empty() {
        return Err(Error::Ingestion { motion: root.display().to_string(), detail: "no motion directories".into() });
    }
    names.sort();
    names.iter().map(|name| load_motion(&root.join(name), name, options)).collect()
}

fn load_motion(dir: &Path, name: &str, options: &LasaOptions) -> Result<LasaMotion> {
    let fail = |detail: String| Error::Ingestion { motion: name.to_string(), detail };
    let mut trajectories = Vec::with_capacity(options.trajectories_per_motion);
    for i in 1..=options.trajectories_per_motion {
        let path = dir.join(format!("demo_{i}.csv"));
        let file = File::open(&path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
        let traj = PoseTrajectory::read_csv(file).map_err(|e| fail(format!("{}: {e}", path.display())))?;
        if traj.len() < 2 || traj.dim() != 2 {
            return Err(fail(format!("{}: expected a planar trajectory with at least two samples", path.display())));
        }
        trajectories.push(traj);
    }
    let extra = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let n = e.file_name().to_string_lossy().into_owned();
            n.starts_with("demo_") && n.ends_with(".csv")
        })
        .count();
    if extra != options.trajectories_per_motion {
        return Err(fail(format!("found {extra} trajectories, expected {}", options.trajectories_per_motion)));
    }
    let attractor = trajectories[0].positions[trajectories[0].len() - 1].clone();
    for (i, t) in trajectories.iter().enumerate() {
        let gap = (&t.positions[t.len() - 1] - &attractor).norm();
        if gap > options.endpoint_tolerance {
            return Err(fail(format!("trajectory {} ends {gap:e} away from the common attractor", i + 1)));
        }
    }
    let mut motion = LasaMotion { name: name.to_string(), trajectories, attractor };
    if options.shift_to_origin {
        let shift = motion.attractor.clone();
        for t in &mut motion.trajectories {
            t.positions.iter_mut().for_each(|x| *x -= &shift);
        }
        motion.attractor = DVector::zeros(2);
    }
    Ok(motion)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// One randomly drawn trajectory per trial.
    Single,
    /// All trajectories of the motion.
    All,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(Protocol::Single),
            "all" => Ok(Protocol::All),
            _ => Err(Error::InvalidInput(format!("unknown protocol `{s}` (single|all)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// One constraint per sample.
    Convex,
    /// One constraint per mixture component.
    Gmm,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Convex => "convex",
            Method::Gmm => "gmm",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub protocol: Protocol,
    pub trials: usize,
    pub seed: u64,
    pub gmm: GmmFitConfig,
    pub pqlf: PqlfConfig,
}

impl BenchConfig {
    pub fn new(protocol: Protocol, trials: usize, seed: u64) -> Self {
        Self { protocol, trials, seed, gmm: GmmFitConfig::with_k_max(8), pqlf: PqlfConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub motion: String,
    pub method: Method,
    pub trial: usize,
    /// Trajectory used for training, 1-based; 0 under the ALL protocol.
    pub trajectory: usize,
    pub time_seconds: f64,
    /// Violation over the full motion; NaN when the fit failed.
    pub violation_fraction: f64,
    /// Learned matrix, row-major.
    pub p: Option<Vec<Vec<f64>>>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub method: Method,
    pub rows: usize,
    pub failed: usize,
    pub mean_time_seconds: f64,
    pub mean_violation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub protocol: Protocol,
    pub rows: Vec<BenchRow>,
}

const REPORT_HEADER: [&str; 8] = ["motion", "method", "trial", "trajectory", "time_seconds", "violation_fraction", "p", "error"];

impl BenchReport {
    /// Mean time and violation per method over successful rows.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        [Method::Convex, Method::Gmm]
            .into_iter()
            .filter_map(|method| {
                let rows: Vec<&BenchRow> = self.rows.iter().filter(|r| r.method == method).collect();
                if rows.is_empty() {
                    return None;
                }
                let ok: Vec<&&BenchRow> = rows.iter().filter(|r| r.error.is_none()).collect();
                let mean = |f: &dyn Fn(&BenchRow) -> f64| {
                    if ok.is_empty() { f64::NAN } else { ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64 }
                };
                Some(Aggregate {
                    method,
                    rows: rows.len(),
                    failed: rows.len() - ok.len(),
                    mean_time_seconds: mean(&|r| r.time_seconds),
                    mean_violation: mean(&|r| r.violation_fraction),
                })
            })
            .collect()
    }

    /// Row for `(motion, method, trial)`.
    pub fn find(&self, motion: &str, method: Method, trial: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.motion == motion && r.method == method && r.trial == trial)
    }

    /// Writes the rows. Timings vary between runs; with `include_timing`
    /// false they are written as 0 so equal seeds give identical bytes.
    pub fn write_csv<W: Write>(&self, out: W, include_timing: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            let time = if include_timing { r.time_seconds } else { 0.0 };
            let p = match &r.p {
                Some(p) => serde_json::to_string(p)?,
                None => String::new(),
            };
            w.write_record([
                r.motion.clone(),
                r.method.as_str().to_string(),
                r.trial.to_string(),
                r.trajectory.to_string(),
                format!("{time:e}"),
                r.violation_fraction.to_string(),
                p,
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, protocol: Protocol) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        if rdr.headers()?.iter().ne(REPORT_HEADER) {
            return Err(Error::InvalidInput("unexpected benchmark report header".into()));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let num = |i: usize| field(i).parse::<f64>().map_err(|e| Error::InvalidInput(format!("column {}: {e}", REPORT_HEADER[i])));
            let int = |i: usize| field(i).parse::<usize>().map_err(|e| Error::InvalidInput(format!("column {}: {e}", REPORT_HEADER[i])));
            let method = match field(1) {
                "convex" => Method::Convex,
                "gmm" => Method::Gmm,
                m => return Err(Error::InvalidInput(format!("unknown method `{m}`"))),
            };
            rows.push(BenchRow {
                motion: field(0).to_string(),
                method,
                trial: int(2)?,
                trajectory: int(3)?,
                time_seconds: num(4)?,
                violation_fraction: num(5)?,
                p: if field(6).is_empty() { None } else { Some(serde_json::from_str(field(6))?) },
                error: if field(7).is_empty() { None } else { Some(field(7).to_string()) },
            });
        }
        Ok(Self { protocol, rows })
    }
}

/// Rebuilds the stored `P` of a successful row.
pub fn row_lyapunov(row: &BenchRow, attractor: &DVector<f64>) -> Result<LyapunovP> {
    let rows = row.p.as_ref().ok_or_else(|| Error::InvalidInput("row has no stored matrix".into()))?;
    let d = rows.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidInput("stored matrix is not square".into()));
    }
    let p = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
    let lam = crate::linalg::min_eigenvalue(&p);
    LyapunovP::new(p, attractor.clone(), lam)
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Runs both P-QLF variants on every motion. Each row's time covers only the
/// optimizer call (plus the summary construction for the mixture variant);
/// violations are measured on all trajectories of the motion.
pub fn run_pqlf_benchmark(motions: &[LasaMotion], config: &BenchConfig) -> Result<BenchReport> {
    if config.trials == 0 {
        return Err(Error::InvalidInput("at least one trial is required".into()));
    }
    let mut rows = Vec::new();
    for (m_index, motion) in motions.iter().enumerate() {
        let all_x = motion.positions();
        let all_v = motion.velocities();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (m_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for trial in 0..config.trials {
            let (trajectory, xs, vs) = match config.protocol {
                Protocol::Single => {
                    let i = rng.random_range(0..motion.trajectories.len());
                    let t = &motion.trajectories[i];
                    (i + 1, t.positions.clone(), t.velocities.clone())
                }
                Protocol::All => (0, all_x.clone(), all_v.clone()),
            };
            let x_star = &motion.attractor;
            let epsilon = default_epsilon(&xs, x_star);
            let row = |method: Method, outcome: Result<(f64, LyapunovP)>| match outcome {
                Ok((time_seconds, p)) => BenchRow {
                    motion: motion.name.clone(),
                    method,
                    trial,
                    trajectory,
                    time_seconds,
                    violation_fraction: violation_fraction(&p, &all_x, &all_v),
                    p: Some(matrix_rows(p.matrix())),
                    error: None,
                },
                Err(e) => BenchRow {
                    motion: motion.name.clone(),
                    method,
                    trial,
                    trajectory,
                    time_seconds: f64::NAN,
                    violation_fraction: f64::NAN,
                    p: None,
                    error: Some(e.to_string()),
                },
            };

            let convex = (|| {
                let start = Instant::now();
                let sol = solve_pqlf(&xs, &vs, None, x_star, epsilon, &config.pqlf)?;
                Ok((start.elapsed().as_secs_f64(), sol.lyapunov))
            })();
            rows.push(row(Method::Convex, convex));

            let gmm_config = GmmFitConfig { seed: config.gmm.seed ^ config.seed ^ ((m_index as u64) << 20) ^ trial as u64, ..config.gmm.clone() };
            let gmm = (|| {
                let fit = fit_position_gmm_with(&xs, &vs, &gmm_config)?;
                let start = Instant::now();
                let summary = GmmSummary::from_labels(&xs, &vs, &fit.labels)?;
                let w = summary.weights();
                let sol = solve_pqlf(&summary.positions, &summary.velocities, Some(&w), x_star, epsilon, &config.pqlf)?;
                Ok((start.elapsed().as_secs_f64(), sol.lyapunov))
            })();
            rows.push(row(Method::Gmm, gmm));
        }
    }
    Ok(BenchReport { protocol: config.protocol, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    /// Nodes per axis.
    pub resolution: Vec<usize>,
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.resolution.iter().fold(1usize, |a, r| a.saturating_mul(*r))
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(2..=3).contains(&dim) {
            return Err(Error::InvalidInput(format!("field export supports 2-D and 3-D policies, got {dim}-D")));
        }
        if self.mins.len() != dim || self.maxs.len() != dim || self.resolution.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: self.resolution.len().min(self.mins.len()).min(self.maxs.len()) });
        }
        if self.resolution.contains(&0) {
            return Err(Error::InvalidInput("grid resolution must be positive".into()));
        }
        if self.mins.iter().zip(&self.maxs).any(|(a, b)| !a.is_finite() || !b.is_finite() || b < a) {
            return Err(Error::InvalidInput("grid bounds must be finite with mins <= maxs".into()));
        }
        let cells = self.cells();
        if cells > GRID_CELL_LIMIT {
            return Err(Error::GridLimit { cells, limit: GRID_CELL_LIMIT });
        }
        Ok(())
    }

    /// Node coordinates, first axis fastest.
    pub fn nodes(&self) -> Vec<DVector<f64>> {
        let d = self.resolution.len();
        let axis = |a: usize, i: usize| {
            let r = self.resolution[a];
            if r == 1 { self.mins[a] } else { self.mins[a] + (self.maxs[a] - self.mins[a]) * i as f64 / (r - 1) as f64 }
        };
        let mut out = Vec::with_capacity(self.cells());
        let mut idx = vec![0usize; d];
        for _ in 0..self.cells() {
            out.push(DVector::from_fn(d, |a, _| axis(a, idx[a])));
            for a in 0..d {
                idx[a] += 1;
                if idx[a] < self.resolution[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        out
    }
}

/// Velocity, Lyapunov value and its rate along the field at every node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub grid: Grid,
    pub points: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub rates: Vec<f64>,
}

impl FieldSample {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let d = self.grid.resolution.len();
        let names = ["x", "y", "z"];
        let vnames = ["vx", "vy", "vz"];
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = names[..d].to_vec();
        header.extend(&vnames[..d]);
        header.extend(["V", "Vdot"]);
        w.write_record(&header)?;
        for i in 0..self.points.len() {
            let mut rec: Vec<String> = self.points[i].iter().map(|v| v.to_string()).collect();
            rec.extend(self.velocities[i].iter().map(|v| v.to_string()));
            rec.push(self.values[i].to_string());
            rec.push(self.rates[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn export_field(policy: &Se3Policy, grid: &Grid) -> Result<FieldSample> {
    let field = policy.position();
    grid.validate(field.dim())?;
    let p = field.lyapunov();
    let nodes = grid.nodes();
    let mut sample = FieldSample {
        grid: grid.clone(),
        points: Vec::with_capacity(nodes.len()),
        velocities: Vec::with_capacity(nodes.len()),
        values: Vec::with_capacity(nodes.len()),
        rates: Vec::with_capacity(nodes.len()),
    };
    for x in nodes {
        let v = field.velocity(&x);
        sample.values.push(p.value(&x));
        sample.rates.push(p.rate(&x, &v));
        sample.points.push(x.as_slice().to_vec());
        sample.velocities.push(v.as_slice().to_vec());
    }
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_nodes_cover_bounds_first_axis_fastest() {
        let g = Grid { mins: vec![0.0, -1.0], maxs: vec![2.0, 1.0], resolution: vec![3, 2] };
        let n = g.nodes();
        assert_eq!(n.len(), 6);
        assert_eq!(n[0].as_slice(), &[0.0, -1.0]);
        assert_eq!(n[1].as_slice(), &[1.0, -1.0]);
        assert_eq!(n[5].as_slice(), &[2.0, 1.0]);
    }

    #[test]
    fn oversize_grid_is_refused() {
        let g = Grid { mins: vec![0.0; 3], maxs: vec![1.0; 3], resolution: vec![101, 100, 100] };
        assert!(matches!(g.validate(3), Err(Error::GridLimit { cells: 1_010_000, limit: 1_000_000 })));
        let ok = Grid { mins: vec![0.0; 3], maxs: vec![1.0; 3], resolution: vec![100, 100, 100] };
        assert!(ok.validate(3).is_ok());
    }

    #[test]
    fn protocol_parses() {
        assert_eq!("SINGLE".parse::<Protocol>().unwrap(), Protocol::Single);
        assert_eq!("all".parse::<Protocol>().unwrap(), Protocol::All);
        assert!("some".parse::<Protocol>().is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let report = BenchReport {
            protocol: Protocol::All,
            rows: vec![
                BenchRow {
                    motion: "A".into(),
                    method: Method::Convex,
                    trial: 0,
                    trajectory: 0,
                    time_seconds: 0.125,
                    violation_fraction: 0.1,
                    p: Some(vec![vec![2.0, 0.1], vec![0.1, 1.0]]),
                    error: None,
                },
                BenchRow {
                    motion: "A".into(),
                    method: Method::Gmm,
                    trial: 0,
                    trajectory: 0,
                    time_seconds: f64::NAN,
                    violation_fraction: f64::NAN,
                    p: None,
                    error: Some("infeasible problem: x, y".into()),
                },
            ],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf, true).unwrap();
        let back = BenchReport::read_csv(buf.as_slice(), Protocol::All).unwrap();
        assert_eq!(back.rows[0], report.rows[0]);
        assert_eq!(back.rows[1].error, report.rows[1].error);
        assert!(back.rows[1].violation_fraction.is_nan());
        let agg = report.aggregates();
        assert_eq!(agg[1].failed, 1);
        assert!((agg[0].mean_violation - 0.1).abs() < 1e-15);
    }
}

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use motionfield::bench::{export_field, load_lasa, run_pqlf_benchmark, BenchConfig, Grid, Protocol};
use motionfield::dslearn::{rollout_with, RolloutConfig};
use motionfield::elastic::{adapt_policy, Keypose};
use motionfield::mixture::GmmFitConfig;
use motionfield::policy::{train_policy, TrainConfig};
use motionfield::runtime::{rollout_modulated, SphereObstacle};
use motionfield::{Pose, PoseTrajectory, Se3Policy, UnitQuaternion};
use nalgebra::{DVector, Vector4};

use crate::server::serve;
use crate::session::{Session, SessionConfig};

#[derive(Debug, Parser)]
#[command(name = "motionfield", version, about = "Train, adapt and run stable motion policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a policy bundle from one demonstration CSV.
    Train(TrainArgs),
    /// Move a policy's goal to a new keypose.
    Adapt(AdaptArgs),
    /// Integrate a policy from a start pose and write the trajectory CSV.
    Rollout(RolloutArgs),
    /// Compare the per-sample and mixture-informed Lyapunov fits on LASA.
    BenchLasa(BenchArgs),
    /// Sample a policy's velocity and Lyapunov value on a grid.
    ExportField(FieldArgs),
    /// Run the policy loop and stream it over a websocket.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Columns t, x, y[, z][, vx, vy[, vz]][, qw, qx, qy, qz].
    #[arg(long)]
    pub demo: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub k_max: usize,
    /// Policy step in seconds.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub policy: PathBuf,
    /// JSON `{"object_pose": pose, "key_offset": pose}`.
    #[arg(long, conflicts_with = "target")]
    pub keypose: Option<PathBuf>,
    /// Goal position, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required_unless_present = "keypose")]
    pub target: Option<Vec<f64>>,
    /// Goal orientation `w,x,y,z`; the current goal orientation when absent.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, requires = "target")]
    pub target_quat: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub start: Vec<f64>,
    /// `w,x,y,z`; the demonstrated start orientation when absent.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub start_quat: Option<Vec<f64>>,
    /// Sphere `cx,cy[,cz],r`; repeatable.
    #[arg(long = "obstacle", allow_hyphen_values = true)]
    pub obstacles: Vec<String>,
    #[arg(long, default_value_t = 5000)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Directory of motion folders with demo_1.csv ... demo_7.csv.
    #[arg(long, default_value = "data/lasa")]
    pub data: PathBuf,
    #[arg(long, default_value = "single")]
    pub protocol: Protocol,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write zero times so that equal seeds give identical files.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args)]
pub struct FieldArgs {
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub mins: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub maxs: Vec<f64>,
    /// Nodes per axis.
    #[arg(long, value_delimiter = ',')]
    pub resolution: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Frames per second.
    #[arg(long, default_value_t = 30.0)]
    pub rate: f64,
    /// Initial position; the demonstrated start when absent.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub start: Option<Vec<f64>>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Adapt(a) => adapt(a),
        Command::Rollout(a) => rollout(a),
        Command::BenchLasa(a) => bench(a),
        Command::ExportField(a) => field(a),
        Command::Serve(a) => run_server(a),
    }
}

pub fn load_policy(path: &Path) -> Result<Se3Policy> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Se3Policy::from_json(&text).with_context(|| format!("parsing policy {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn quaternion(values: &[f64]) -> Result<UnitQuaternion> {
    let [w, x, y, z] = values else { bail!("a quaternion needs four values w,x,y,z, got {}", values.len()) };
    Ok(UnitQuaternion::from_vector(&Vector4::new(*w, *x, *y, *z))?)
}

fn train(a: TrainArgs) -> Result<()> {
    let file = File::open(&a.demo).with_context(|| format!("opening {}", a.demo.display()))?;
    let demo = PoseTrajectory::read_csv(file).with_context(|| format!("reading {}", a.demo.display()))?;
    let mut gmm = GmmFitConfig::with_k_max(a.k_max);
    if let Some(seed) = a.seed {
        gmm.seed = seed;
    }
    let config = TrainConfig { gmm, dt: a.dt, ..TrainConfig::default() };
    let policy = train_policy(&demo, &config)?;
    std::fs::write(&a.out, policy.to_json()?).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "trained {}-D policy: K={} position components, {} orientation components{}",
        policy.position().dim(),
        policy.position().gmm().len(),
        policy.orientation().map_or(0, |o| o.gmm().len()),
        if demo.velocities_estimated { " (velocities from finite differences)" } else { "" },
    );
    Ok(())
}

fn adapt(a: AdaptArgs) -> Result<()> {
    let policy = load_policy(&a.policy)?;
    let keypose = match (&a.keypose, &a.target) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Keypose::from_json(&text)?
        }
        (None, Some(pos)) => {
            let orientation = match &a.target_quat {
                Some(q) => quaternion(q)?,
                None => policy.attractor().orientation,
            };
            let target = Pose::new(DVector::from_vec(pos.clone()), orientation);
            let d = target.position.len();
            Keypose { object_pose: target, key_offset: Pose::from_position(DVector::zeros(d)) }
        }
        (None, None) => bail!("either --keypose or --target is required"),
    };
    let start = std::time::Instant::now();
    let adapted = adapt_policy(&policy, &keypose, None)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    std::fs::write(&a.out, adapted.to_json()?).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("adapted in {ms:.2} ms; new goal {:?}", adapted.attractor().position.as_slice());
    Ok(())
}

pub fn parse_obstacle(spec: &str) -> Result<SphereObstacle> {
    let values: Vec<f64> = spec
        .split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("obstacle `{spec}`")))
        .collect::<Result<_>>()?;
    let Some((radius, center)) = values.split_last() else { bail!("empty obstacle") };
    if center.len() < 2 {
        bail!("obstacle `{spec}` needs a center and a radius");
    }
    Ok(SphereObstacle::new(DVector::from_column_slice(center), *radius)?)
}

fn rollout(a: RolloutArgs) -> Result<()> {
    let policy = load_policy(&a.policy)?;
    let orientation = match &a.start_quat {
        Some(q) => quaternion(q)?,
        None => policy.nominal().map_or(UnitQuaternion::IDENTITY, |n| n.start.orientation),
    };
    let start = Pose::new(DVector::from_vec(a.start.clone()), orientation);
    let obstacles = a.obstacles.iter().map(|s| parse_obstacle(s)).collect::<Result<Vec<_>>>()?;
    let config = RolloutConfig { max_steps: a.max_steps, position_tolerance: a.tolerance, ..RolloutConfig::default() };
    let run = if obstacles.is_empty() {
        rollout_with(&policy, &start, &config, |_, v| Ok(v))?
    } else {
        rollout_modulated(&policy, &start, &obstacles, &config)?
    };
    let mut out = create(&a.out)?;
    run.trajectory.write_csv(&mut out)?;
    out.flush()?;
    eprintln!("{:?} after {} steps", run.termination, run.steps);
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let motions = load_lasa(&a.data)?;
    let report = run_pqlf_benchmark(&motions, &BenchConfig::new(a.protocol, a.trials, a.seed))?;
    let mut out = create(&a.out)?;
    report.write_csv(&mut out, !a.no_timing)?;
    out.flush()?;
    for agg in report.aggregates() {
        eprintln!(
            "{:<7} rows {:>4}  failed {:>3}  mean violation {:6.2}%  mean time {:.4} s",
            agg.method.as_str(),
            agg.rows,
            agg.failed,
            100.0 * agg.mean_violation,
            agg.mean_time_seconds
        );
    }
    Ok(())
}

fn field(a: FieldArgs) -> Result<()> {
    let policy = load_policy(&a.policy)?;
    let grid = Grid { mins: a.mins, maxs: a.maxs, resolution: a.resolution };
    let sample = export_field(&policy, &grid)?;
    let mut out = create(&a.out)?;
    sample.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn run_server(a: ServeArgs) -> Result<()> {
    let policy = load_policy(&a.policy)?;
    let start = match &a.start {
        Some(p) => Pose::new(DVector::from_vec(p.clone()), policy.nominal().map_or(UnitQuaternion::IDENTITY, |n| n.start.orientation)),
        None => match policy.nominal() {
            Some(n) => n.start.clone(),
            None => bail!("policy has no demonstrated start; pass --start"),
        },
    };
    let session = Session::single(policy, start, SessionConfig { rate_hz: a.rate, ..SessionConfig::default() })?;
    let listener = TcpListener::bind((a.host.as_str(), a.port)).with_context(|| format!("binding {}:{}", a.host, a.port))?;
    eprintln!("serving on ws://{}", listener.local_addr()?);
    let stop = Arc::new(AtomicBool::new(false));
    let ticker = session.spawn_ticker(stop.clone());
    let result = serve(session, listener, stop.clone());
    stop.store(true, std::sync::atomic::Ordering::Relaxed);
    let _ = ticker.join();
    Ok(result?)
}

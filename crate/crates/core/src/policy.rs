//! Full-pose policies: training from a demonstration and the JSON bundle.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dslearn::{learn_lpv_systems_with, LinearSystems, OrientationField, PositionField, SystemFitConfig};
use crate::elastic::{extract_joints, label_speeds, realize, LabeledSamples, NominalSpace, NominalState, RefitSettings, RetrainData};
use crate::linalg::RigidTransform;
use crate::lyapunov::{default_epsilon, solve_pqlf, LyapunovP, PqlfConfig};
use crate::manifold::{canonicalize_signs, quat_log, UnitQuaternion};
use crate::mixture::{fit_position_gmm_with, fit_quat_gmm_with, GmmDocument, GmmFitConfig, GmmModel, TangentGmm};
use crate::trajectory::PoseTrajectory;
use crate::{Error, Result};

pub const BUNDLE_VERSION: u32 = 1;
pub const DEFAULT_DT: f64 = 0.01;

/// Position plus orientation. Wire form `{"pos": [...], "quat": [w, x, y, z]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    #[serde(rename = "pos", with = "dvector_as_vec")]
    pub position: DVector<f64>,
    #[serde(rename = "quat", default)]
    pub orientation: UnitQuaternion,
}

impl Pose {
    pub fn new(position: DVector<f64>, orientation: UnitQuaternion) -> Self {
        Self { position, orientation }
    }

    pub fn from_position(position: DVector<f64>) -> Self {
        Self { position, orientation: UnitQuaternion::IDENTITY }
    }

    /// Rotation acting on positions: the full matrix in 3-D, the rotation
    /// about z in 2-D, identity otherwise.
    pub fn rotation(&self) -> DMatrix<f64> {
        let r: Matrix3<f64> = self.orientation.to_rotation_matrix();
        match self.position.len() {
            3 => DMatrix::from_column_slice(3, 3, r.as_slice()),
            2 => {
                let yaw = r[(1, 0)].atan2(r[(0, 0)]);
                let (s, c) = yaw.sin_cos();
                DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
            }
            d => DMatrix::identity(d, d),
        }
    }

    pub fn to_rigid(&self) -> Result<RigidTransform> {
        RigidTransform::new(self.rotation(), self.position.clone())
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Pose) -> Result<Pose> {
        if self.position.len() != other.position.len() {
            return Err(Error::DimensionMismatch { expected: self.position.len(), got: other.position.len() });
        }
        Ok(Pose {
            position: &self.position + self.rotation() * &other.position,
            orientation: self.orientation.compose(&other.orientation),
        })
    }

    pub fn inverse(&self) -> Pose {
        let orientation = self.orientation.conjugate();
        let inv = Pose { position: DVector::zeros(self.position.len()), orientation };
        Pose { position: -(inv.rotation() * &self.position), orientation }
    }
}

pub(crate) mod dvector_as_vec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the demonstration in CSV form.
    pub source_sha256: String,
    pub seed: u64,
}

/// Position field, optional orientation field, step length and the nominal
/// state adaptation starts from. Immutable once built.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(into = "PolicyBundle", try_from = "PolicyBundle")]
pub struct Se3Policy {
    position: PositionField,
    orientation: Option<OrientationField>,
    dt: f64,
    provenance: Provenance,
    nominal: Option<Arc<NominalState>>,
}

impl PartialEq for Se3Policy {
    fn eq(&self, other: &Self) -> bool {
        self.position == other.position && self.orientation == other.orientation && self.dt == other.dt
    }
}

impl Se3Policy {
    pub fn assemble(
        position: PositionField,
        orientation: Option<OrientationField>,
        dt: f64,
        provenance: Provenance,
        nominal: Option<Arc<NominalState>>,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidInput("dt must be positive".into()));
        }
        Ok(Self { position, orientation, dt, provenance, nominal })
    }

    pub fn position(&self) -> &PositionField {
        &self.position
    }

    pub fn orientation(&self) -> Option<&OrientationField> {
        self.orientation.as_ref()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn nominal(&self) -> Option<&Arc<NominalState>> {
        self.nominal.as_ref()
    }

    /// The goal pose (identity orientation when there is no orientation field).
    pub fn attractor(&self) -> Pose {
        Pose {
            position: self.position.attractor().clone(),
            orientation: self.orientation.as_ref().map_or(UnitQuaternion::IDENTITY, |o| o.attractor()),
        }
    }

    pub fn lyapunov(&self) -> &LyapunovP {
        self.position.lyapunov()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PositionDocument {
    pub gmm: GmmDocument,
    /// `A_k` as nested rows.
    #[serde(rename = "A")]
    pub a: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    pub attractor: Vec<f64>,
    pub epsilon: f64,
    pub margin: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrientationDocument {
    pub gmm: GmmDocument,
    /// `A_k` in the tangent-basis coordinates of the attractor.
    #[serde(rename = "A")]
    pub a: Vec<Vec<Vec<f64>>>,
    pub attractor: UnitQuaternion,
    pub margin: f64,
}

/// Versioned serialized form of [`Se3Policy`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub version: u32,
    pub position: PositionDocument,
    pub orientation: Option<OrientationDocument>,
    pub dt: f64,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elastic: Option<NominalState>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], d: usize) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidInput(format!("expected a {d}x{d} matrix")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

impl From<Se3Policy> for PolicyBundle {
    fn from(p: Se3Policy) -> Self {
        let pos = &p.position;
        let position = PositionDocument {
            gmm: pos.gmm().clone().into(),
            a: pos.systems().matrices().iter().map(rows).collect(),
            p: rows(pos.lyapunov().matrix()),
            attractor: pos.attractor().as_slice().to_vec(),
            epsilon: pos.lyapunov().epsilon(),
            margin: pos.systems().margin(),
            radius: pos.radius(),
        };
        let orientation = p.orientation.as_ref().map(|o| OrientationDocument {
            gmm: o.gmm().clone().into(),
            a: o.systems().matrices().iter().map(rows).collect(),
            attractor: o.attractor(),
            margin: o.systems().margin(),
        });
        PolicyBundle {
            version: BUNDLE_VERSION,
            position,
            orientation,
            dt: p.dt,
            provenance: p.provenance.clone(),
            elastic: p.nominal.as_deref().cloned(),
        }
    }
}

impl TryFrom<PolicyBundle> for Se3Policy {
    type Error = Error;
    fn try_from(b: PolicyBundle) -> Result<Self> {
        if b.version != BUNDLE_VERSION {
            return Err(Error::InvalidInput(format!("unsupported bundle version {}", b.version)));
        }
        let d = b.position.attractor.len();
        let p = from_rows(&b.position.p, d)?;
        let lyapunov = LyapunovP::new(p.clone(), DVector::from_vec(b.position.attractor.clone()), b.position.epsilon)?;
        let matrices = b.position.a.iter().map(|a| from_rows(a, d)).collect::<Result<Vec<_>>>()?;
        let systems = LinearSystems::new(matrices, p, b.position.margin)?;
        let gmm = GmmModel::try_from(b.position.gmm)?;
        let position = PositionField::new(gmm, systems, lyapunov, b.position.radius)?;
        let orientation = match b.orientation {
            None => None,
            Some(o) => {
                let tgmm = TangentGmm::try_from(o.gmm)?;
                if tgmm.attractor().dot(&o.attractor).abs() < 1.0 - 1e-12 {
                    return Err(Error::InvalidInput("orientation attractor differs from its mixture".into()));
                }
                let matrices = o.a.iter().map(|a| from_rows(a, 3)).collect::<Result<Vec<_>>>()?;
                let systems = LinearSystems::new(matrices, DMatrix::identity(3, 3), o.margin)?;
                Some(OrientationField::new(tgmm, systems)?)
            }
        };
        Se3Policy::assemble(position, orientation, b.dt, b.provenance, b.elastic.map(Arc::new))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gmm: GmmFitConfig,
    pub pqlf: PqlfConfig,
    pub fit: SystemFitConfig,
    pub retrain: RetrainData,
    /// Policy step; `DEFAULT_DT` when absent. Position systems are certified
    /// for Euler steps of this length.
    pub dt: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gmm: GmmFitConfig::with_k_max(8),
            pqlf: PqlfConfig::default(),
            fit: SystemFitConfig::default(),
            retrain: RetrainData::Summary,
            dt: None,
        }
    }
}

/// SHA-256 of the CSV serialization of `traj`.
pub fn demo_hash(traj: &PoseTrajectory) -> Result<String> {
    let mut buf = Vec::new();
    traj.write_csv(&mut buf)?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

/// Trains an adaptable policy from one demonstration. The goal is the last
/// sample. Fields are fit through the same path adaptation uses, so adapting
/// to the demonstrated goal reproduces this policy.
pub fn train_policy(demo: &PoseTrajectory, config: &TrainConfig) -> Result<Se3Policy> {
    demo.validate()?;
    if demo.len() < 10 {
        return Err(Error::InsufficientData("training needs at least 10 samples".into()));
    }
    let dt = config.dt.unwrap_or(DEFAULT_DT);
    let n = demo.len();
    let fit = fit_position_gmm_with(&demo.positions, &demo.velocities, &config.gmm)?;
    let labels = fit.labels;
    let gmm = fit.model;
    let start_x = demo.positions[0].clone();
    let x_star = demo.positions[n - 1].clone();
    let chain = extract_joints(&gmm, &start_x, &x_star)?;
    let keep_samples = config.retrain == RetrainData::Demonstration;
    let position = NominalSpace {
        summary: LabeledSamples::summarize(&gmm, &demo.positions, &demo.velocities, &labels),
        speeds: label_speeds(&demo.velocities, &labels, gmm.len()),
        samples: keep_samples.then(|| LabeledSamples {
            points: demo.positions.clone(),
            rates: demo.velocities.clone(),
            weights: vec![1.0; n],
            labels: labels.clone(),
        }),
        chain: Some(chain),
        gmm,
    };

    let quats = if demo.has_orientation() { canonicalize_signs(&demo.orientations) } else { Vec::new() };
    let (start_q, target_q) = match (quats.first(), quats.last()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => (UnitQuaternion::IDENTITY, UnitQuaternion::IDENTITY),
    };
    let orientation = if quats.is_empty() { None } else { Some(orientation_space(&quats, &demo.times, &target_q, config)?) };

    let nominal = Arc::new(NominalState {
        start: Pose::new(start_x, start_q),
        target: Pose::new(x_star, target_q),
        position,
        orientation,
        settings: RefitSettings { retrain: config.retrain, pqlf: config.pqlf.clone(), fit: config.fit },
    });
    let provenance = Provenance { source_sha256: demo_hash(demo)?, seed: config.gmm.seed };
    realize(&nominal, &nominal.target.clone(), &nominal.start.clone(), dt, provenance)
}

/// Nominal orientation space in the chart of `q_att`: reduced logs and their
/// time derivatives.
fn orientation_space(quats: &[UnitQuaternion], times: &[f64], q_att: &UnitQuaternion, config: &TrainConfig) -> Result<NominalSpace> {
    let (tgmm, labels) = fit_quat_gmm_with(quats, q_att, &config.gmm)?;
    let basis = tgmm.basis();
    let points: Vec<DVector<f64>> =
        quats.iter().map(|q| DVector::from_column_slice(basis.reduce(&quat_log(q_att, q).coords).as_slice())).collect();
    let n = points.len();
    let mut rates = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = if i + 1 < n { (i, i + 1) } else { (i.saturating_sub(1), i) };
        let dt = times[b] - times[a];
        rates.push(if dt > 0.0 { (&points[b] - &points[a]) / dt } else { DVector::zeros(3) });
    }
    let gmm = tgmm.reduced().clone();
    let chain = extract_joints(&gmm, &points[0], &DVector::zeros(3)).ok();
    Ok(NominalSpace {
        summary: LabeledSamples::summarize(&gmm, &points, &rates, &labels),
        speeds: label_speeds(&rates, &labels, gmm.len()),
        samples: (config.retrain == RetrainData::Demonstration).then(|| LabeledSamples {
            points: points.clone(),
            rates: rates.clone(),
            weights: vec![1.0; n],
            labels: labels.clone(),
        }),
        chain,
        gmm,
    })
}

/// Position-only policy fit on every sample of several demonstrations sharing
/// a goal (convex `P`, then the systems). Not adaptable.
pub fn train_position_policy(demos: &[PoseTrajectory], attractor: &DVector<f64>, config: &TrainConfig) -> Result<Se3Policy> {
    let positions: Vec<DVector<f64>> = demos.iter().flat_map(|d| d.positions.iter().cloned()).collect();
    let velocities: Vec<DVector<f64>> = demos.iter().flat_map(|d| d.velocities.iter().cloned()).collect();
    if positions.len() < 10 {
        return Err(Error::InsufficientData("training needs at least 10 samples".into()));
    }
    let dt = config.dt.unwrap_or(DEFAULT_DT);
    let gmm = fit_position_gmm_with(&positions, &velocities, &config.gmm)?.model;
    let epsilon = default_epsilon(&positions, attractor);
    let p = solve_pqlf(&positions, &velocities, None, attractor, epsilon, &config.pqlf)?.lyapunov;
    let margin = crate::dslearn::default_position_margin(&p);
    let fit = SystemFitConfig { euler_step: Some(dt), ..config.fit };
    let systems = learn_lpv_systems_with(&gmm, &positions, &velocities, None, &p, margin, &fit)?;
    let radius = positions.iter().map(|x| (x - attractor).norm()).fold(0.0, f64::max);
    let position = PositionField::new(gmm, systems, p, radius)?;
    let mut hasher = Sha256::new();
    for d in demos {
        hasher.update(demo_hash(d)?.as_bytes());
    }
    let provenance = Provenance { source_sha256: hex::encode(hasher.finalize()), seed: config.gmm.seed };
    Se3Policy::assemble(position, None, dt, provenance, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    /// Curved 3-D reach with a rotation about a fixed axis, ending at rest.
    pub(crate) fn synthetic_demo() -> PoseTrajectory {
        let n = 200;
        let dt = 0.02;
        let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        let s = |t: f64| 1.0 - (1.0 - t / times[n - 1]).powi(3);
        let positions: Vec<DVector<f64>> = times
            .iter()
            .map(|t| {
                let u = s(*t);
                DVector::from_vec(vec![0.5 * (1.0 - u), 0.3 * (std::f64::consts::PI * u).sin(), 0.2 * (1.0 - u) * (1.0 - u)])
            })
            .collect();
        let orientations = times.iter().map(|t| UnitQuaternion::from_axis_angle(&Vector3::new(0.2, 0.3, 1.0), 0.8 * (1.0 - s(*t)))).collect();
        PoseTrajectory::from_positions(times, positions, orientations).unwrap()
    }

    #[test]
    fn pose_algebra() {
        let a = Pose::new(DVector::from_vec(vec![1.0, 2.0, 3.0]), UnitQuaternion::from_axis_angle(&Vector3::z(), 0.5));
        let b = Pose::new(DVector::from_vec(vec![-1.0, 0.5, 0.0]), UnitQuaternion::from_axis_angle(&Vector3::x(), 0.3));
        let ab = a.compose(&b).unwrap();
        let back = a.inverse().compose(&ab).unwrap();
        assert!((back.position - &b.position).amax() < 1e-12);
        assert!(back.orientation.dot(&b.orientation).abs() > 1.0 - 1e-12);
        let json = serde_json::to_string(&a).unwrap();
        assert!(json.contains("\"pos\"") && json.contains("\"quat\""));
        assert_eq!(serde_json::from_str::<Pose>(&json).unwrap(), a);
    }

    #[test]
    fn trained_policy_round_trips_and_vanishes_at_goal() {
        let demo = synthetic_demo();
        let policy = train_policy(&demo, &TrainConfig::default()).unwrap();
        let goal = policy.attractor();
        assert_eq!(policy.position().velocity(&goal.position), DVector::zeros(3));
        let o = policy.orientation().unwrap();
        assert_eq!(o.angular_velocity(&goal.orientation, policy.dt()).unwrap(), Vector3::zeros());
        let json = policy.to_json().unwrap();
        assert!(json.contains("\"version\": 1") && json.contains("source_sha256"));
        let back = Se3Policy::from_json(&json).unwrap();
        assert_eq!(back, policy);
        assert_eq!(back.nominal().map(|n| n.as_ref()), policy.nominal().map(|n| n.as_ref()));
    }
}

//! Elastic reshaping of a trained policy.
//!
//! A mixture ordered along the demonstration yields a chain of joints
//! (precision-weighted midpoints of neighboring components, plus the start
//! point and the attractor). Moving the endpoint pairs of the chain and
//! solving a constrained Laplacian least-squares problem for the rest gives a
//! new chain; every component then follows the rigid motion of its segment.
//! Orientation mixtures take the same route in the reduced tangent chart of
//! their attractor.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dslearn::{fit_systems, learn_lpv_systems_with, OrientationField, PositionField, SystemFitConfig, ORIENTATION_MARGIN};
use crate::linalg::{minimal_rotation, symmetrize, RigidTransform};
use crate::lyapunov::{default_epsilon, solve_pqlf, PqlfConfig};
use crate::manifold::{left_multiplication, quat_log, tangent_basis, TangentBasis, UnitQuaternion};
use crate::mixture::{GaussianComponent, GmmModel, TangentGmm};
use crate::policy::{Pose, Provenance, Se3Policy};
use crate::{Error, Result};

/// Minimum distance between consecutive joints.
pub const MIN_JOINT_SPACING: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum JointSource {
    Start,
    /// Joint between components `left` and `right` (temporal indices).
    Pair { left: usize, right: usize },
    Attractor,
}

/// Ordered joints on a path graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChainDocument", into = "ChainDocument")]
pub struct JointChain {
    joints: Vec<DVector<f64>>,
    sources: Vec<JointSource>,
}

/// Chain dump format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainDocument {
    pub joints: Vec<Vec<f64>>,
    pub sources: Vec<JointSource>,
}

impl From<JointChain> for ChainDocument {
    fn from(c: JointChain) -> Self {
        ChainDocument { joints: c.joints.iter().map(|j| j.as_slice().to_vec()).collect(), sources: c.sources }
    }
}

impl TryFrom<ChainDocument> for JointChain {
    type Error = Error;
    fn try_from(doc: ChainDocument) -> Result<Self> {
        JointChain::new(doc.joints.into_iter().map(DVector::from_vec).collect(), doc.sources)
    }
}

impl JointChain {
    pub fn new(joints: Vec<DVector<f64>>, sources: Vec<JointSource>) -> Result<Self> {
        if joints.len() < 2 {
            return Err(Error::DegenerateChain("a chain needs at least two joints".into()));
        }
        if sources.len() != joints.len() {
            return Err(Error::InvalidInput("one source per joint required".into()));
        }
        let d = joints[0].len();
        if let Some(bad) = joints.iter().find(|j| j.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: bad.len() });
        }
        if joints.iter().any(|j| j.iter().any(|v| !v.is_finite())) {
            return Err(Error::DegenerateChain("non-finite joint".into()));
        }
        for (i, w) in joints.windows(2).enumerate() {
            let gap = (&w[1] - &w[0]).norm();
            if gap <= MIN_JOINT_SPACING {
                return Err(Error::DegenerateChain(format!("joints {i} and {} coincide (gap {gap:e})", i + 1)));
            }
        }
        Ok(Self { joints, sources })
    }

    pub fn joints(&self) -> &[DVector<f64>] {
        &self.joints
    }

    pub fn sources(&self) -> &[JointSource] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.joints[0].len()
    }

    pub fn segments(&self) -> usize {
        self.joints.len() - 1
    }
}

/// Precision-weighted combination of two Gaussians:
/// `Σ_t = (Σ_a⁻¹ + Σ_b⁻¹)⁻¹`, `β = Σ_t (Σ_a⁻¹ μ_a + Σ_b⁻¹ μ_b)`.
pub fn pair_joint(a: &GaussianComponent, b: &GaussianComponent) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let inv = |c: &DMatrix<f64>| {
        c.clone().cholesky().map(|ch| ch.inverse()).ok_or_else(|| Error::Numerical("component covariance is not positive definite".into()))
    };
    let (pa, pb) = (inv(&a.cov)?, inv(&b.cov)?);
    let precision = symmetrize(&(&pa + &pb));
    let chol = precision.cholesky().ok_or_else(|| Error::Numerical("singular covariance sum".into()))?;
    let joint = chol.solve(&(&pa * &a.mean + &pb * &b.mean));
    Ok((joint, symmetrize(&chol.inverse())))
}

/// `[start, β_{1,2}, …, β_{K−1,K}, attractor]` over the temporally ordered
/// components of `gmm`.
pub fn extract_joints(gmm: &GmmModel, start: &DVector<f64>, attractor: &DVector<f64>) -> Result<JointChain> {
    let d = gmm.dim();
    for p in [start, attractor] {
        if p.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: p.len() });
        }
    }
    let comps = gmm.components();
    let mut joints = vec![start.clone()];
    let mut sources = vec![JointSource::Start];
    for k in 1..comps.len() {
        joints.push(pair_joint(&comps[k - 1], &comps[k])?.0);
        sources.push(JointSource::Pair { left: k - 1, right: k });
    }
    joints.push(attractor.clone());
    sources.push(JointSource::Attractor);
    JointChain::new(joints, sources)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Start,
    End,
}

/// Rigid motion imposed on the joint pair at one end of a chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricConstraint {
    pub anchor: Anchor,
    pub transform: RigidTransform,
}

impl GeometricConstraint {
    pub fn new(anchor: Anchor, transform: RigidTransform) -> Result<Self> {
        let transform = RigidTransform::new(transform.rotation, transform.translation)?;
        Ok(Self { anchor, transform })
    }
}

/// Unnormalized Laplacian `D − A` of the path graph on `n` nodes.
pub fn path_laplacian(n: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        l[(i, i)] += 1.0;
        l[(i + 1, i + 1)] += 1.0;
        l[(i, i + 1)] -= 1.0;
        l[(i + 1, i)] -= 1.0;
    }
    l
}

/// Joint indices pinned by the constraints, with their targets.
///
/// Each constraint pins its anchor joint and the neighbor of that anchor.
/// A neighbor that is the other end's anchor, or that both constraints would
/// pin, is left to the Laplacian objective (short chains).
fn pinned_joints(chain: &JointChain, constraints: &[GeometricConstraint]) -> Result<Vec<(usize, DVector<f64>)>> {
    let last = chain.len() - 1;
    let mut start = None;
    let mut end = None;
    for c in constraints {
        if c.transform.dim() != chain.dim() {
            return Err(Error::DimensionMismatch { expected: chain.dim(), got: c.transform.dim() });
        }
        RigidTransform::new(c.transform.rotation.clone(), c.transform.translation.clone())?;
        let slot = match c.anchor {
            Anchor::Start => &mut start,
            Anchor::End => &mut end,
        };
        if slot.replace(&c.transform).is_some() {
            return Err(Error::ConstraintConflict(format!("more than one {:?} constraint", c.anchor)));
        }
    }
    let mut pins: Vec<(usize, DVector<f64>)> = Vec::new();
    let joints = chain.joints();
    if let Some(t) = start {
        pins.push((0, t.apply(&joints[0])));
    }
    if let Some(t) = end {
        pins.push((last, t.apply(&joints[last])));
    }
    let start_nb = 1;
    let end_nb = last - 1;
    if let Some(t) = start {
        let claimed = end.is_some() && (start_nb == last || start_nb == end_nb);
        if !claimed {
            pins.push((start_nb, t.apply(&joints[start_nb])));
        }
    }
    if let Some(t) = end {
        let claimed = start.is_some() && (end_nb == 0 || end_nb == start_nb);
        if !claimed {
            pins.push((end_nb, t.apply(&joints[end_nb])));
        }
    }
    pins.sort_by_key(|(i, _)| *i);
    Ok(pins)
}

/// Minimizes `‖Lβ − Δ‖²` with `Δ = Lβ_original` over the joints not pinned
/// by `constraints`; pinned joints take their transformed positions exactly.
pub fn laplacian_edit(chain: &JointChain, constraints: &[GeometricConstraint]) -> Result<JointChain> {
    let pins = pinned_joints(chain, constraints)?;
    if pins.is_empty() {
        return Ok(chain.clone());
    }
    let n = chain.len();
    let d = chain.dim();
    let mut fixed = vec![None; n];
    for (i, target) in &pins {
        fixed[*i] = Some(target.clone());
    }
    let free: Vec<usize> = (0..n).filter(|i| fixed[*i].is_none()).collect();
    let mut out: Vec<DVector<f64>> = (0..n).map(|i| fixed[i].clone().unwrap_or_else(|| chain.joints[i].clone())).collect();
    if !free.is_empty() {
        let l = path_laplacian(n);
        let original = DMatrix::from_fn(n, d, |i, c| chain.joints[i][c]);
        let delta = &l * &original;
        let mut rhs = delta;
        for (i, target) in &pins {
            for c in 0..d {
                let v = target[c];
                for r in 0..n {
                    rhs[(r, c)] -= l[(r, *i)] * v;
                }
            }
        }
        let l_free = DMatrix::from_fn(n, free.len(), |r, c| l[(r, free[c])]);
        let normal = l_free.transpose() * &l_free;
        let chol = normal.cholesky().ok_or_else(|| Error::Numerical("Laplacian system is singular".into()))?;
        let solution = chol.solve(&(l_free.transpose() * rhs));
        for (row, i) in free.iter().enumerate() {
            out[*i] = solution.row(row).transpose();
        }
    }
    JointChain::new(out, chain.sources.clone())
}

/// Rigid transform carrying each segment `(β_j, β_{j+1})` of `old` onto the
/// corresponding segment of `new`: the minimal rotation aligning the segment
/// directions (in 3-D followed by the twist about the new direction that best
/// aligns the neighboring segments), pivoting midpoint to midpoint.
pub fn segment_transforms(old: &JointChain, new: &JointChain) -> Result<Vec<RigidTransform>> {
    if old.len() != new.len() || old.dim() != new.dim() {
        return Err(Error::InvalidInput("chains differ in length or dimension".into()));
    }
    let d = old.dim();
    let dirs = |c: &JointChain| -> Vec<DVector<f64>> { c.joints.windows(2).map(|w| &w[1] - &w[0]).collect() };
    let (od, nd) = (dirs(old), dirs(new));
    let mut out = Vec::with_capacity(od.len());
    for j in 0..od.len() {
        let mut r = minimal_rotation(&od[j], &nd[j])?;
        if d == 3 {
            let n = Vector3::from_column_slice(nd[j].normalize().as_slice());
            let (mut s, mut c) = (0.0, 0.0);
            for nb in [j.wrapping_sub(1), j + 1] {
                if nb >= od.len() {
                    continue;
                }
                let a = Vector3::from_column_slice((&r * &od[nb]).as_slice());
                let b = Vector3::from_column_slice(nd[nb].as_slice());
                let a = a - n * n.dot(&a);
                let b = b - n * n.dot(&b);
                s += n.dot(&a.cross(&b));
                c += a.dot(&b);
            }
            if s != 0.0 {
                let phi = s.atan2(c);
                let twist = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(n), phi).into_inner();
                r = DMatrix::from_column_slice(3, 3, twist.as_slice()) * r;
            }
        }
        let mid_old = (&old.joints[j] + &old.joints[j + 1]) * 0.5;
        let mid_new = (&new.joints[j] + &new.joints[j + 1]) * 0.5;
        let translation = &mid_new - &r * &mid_old;
        out.push(RigidTransform { rotation: r, translation });
    }
    Ok(out)
}

/// Moves component `k` with the rigid motion of segment `k`; priors are kept.
pub fn morph_gmm(original: &GmmModel, old_chain: &JointChain, new_chain: &JointChain) -> Result<GmmModel> {
    let transforms = segment_transforms(old_chain, new_chain)?;
    morph_with(original, &transforms)
}

fn morph_with(original: &GmmModel, transforms: &[RigidTransform]) -> Result<GmmModel> {
    if transforms.len() != original.len() {
        return Err(Error::InvalidInput(format!("{} segments for {} components", transforms.len(), original.len())));
    }
    let components = original
        .components()
        .iter()
        .zip(transforms)
        .map(|(c, t)| GaussianComponent {
            prior: c.prior,
            mean: t.apply(&c.mean),
            cov: symmetrize(&(&t.rotation * &c.cov * t.rotation.transpose())),
        })
        .collect();
    GmmModel::new(components, original.ordering().to_vec())
}

/// A tangent mixture in the 3-D chart of its attractor.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedQuatGmm {
    pub attractor: UnitQuaternion,
    pub priors: Vec<f64>,
    /// `Λ_attᵀ μ̃_k`
    pub means: Vec<Vector3<f64>>,
    /// `Λ_μkᵀ Σ̃_k Λ_μk`
    pub covariances: Vec<Matrix3<f64>>,
    /// `Λ_μk`, the attractor basis carried to each mean quaternion.
    pub bases: Vec<TangentBasis>,
    pub ordering: Vec<usize>,
}

impl ReducedQuatGmm {
    pub fn to_gmm(&self) -> Result<GmmModel> {
        let components = (0..self.priors.len())
            .map(|k| GaussianComponent {
                prior: self.priors[k],
                mean: DVector::from_column_slice(self.means[k].as_slice()),
                cov: DMatrix::from_column_slice(3, 3, self.covariances[k].as_slice()),
            })
            .collect();
        GmmModel::new(components, self.ordering.clone())
    }

    /// Replaces means and covariances by those of a 3-D mixture; bases are
    /// recomputed at the new means.
    pub fn with_gmm(&self, gmm: &GmmModel) -> Result<Self> {
        if gmm.dim() != 3 || gmm.len() != self.priors.len() {
            return Err(Error::InvalidInput("reduced mixture shape mismatch".into()));
        }
        let att_basis = tangent_basis(&self.attractor);
        let mut out = self.clone();
        for (k, c) in gmm.components().iter().enumerate() {
            let mean = Vector3::from_column_slice(c.mean.as_slice());
            let mean_q = crate::manifold::quat_exp(&self.attractor, &att_basis.lift(&mean))?;
            out.means[k] = mean;
            out.covariances[k] = Matrix3::from_column_slice(c.cov.as_slice());
            out.bases[k] = att_basis.transported(&mean_q)?;
        }
        Ok(out)
    }
}

pub fn reduce_quat_gmm(tgmm: &TangentGmm) -> Result<ReducedQuatGmm> {
    let att = tgmm.attractor();
    let basis = *tgmm.basis();
    let mut means = Vec::with_capacity(tgmm.len());
    let mut covariances = Vec::with_capacity(tgmm.len());
    let mut bases = Vec::with_capacity(tgmm.len());
    for k in 0..tgmm.len() {
        let mean_basis = basis.transported(&tgmm.mean_quaternion(k))?;
        means.push(basis.reduce(&tgmm.means()[k]));
        covariances.push(mean_basis.reduce_covariance(&tgmm.covariances()[k]));
        bases.push(mean_basis);
    }
    Ok(ReducedQuatGmm {
        attractor: att,
        priors: tgmm.priors().to_vec(),
        means,
        covariances,
        bases,
        ordering: tgmm.ordering().to_vec(),
    })
}

/// `μ̃*_k = Λ_att μ̂*_k` (the log at the attractor of `exp_att(Λ_att μ̂*_k)`)
/// and `Σ̃*_k = Λ_μk Σ̂*_k Λ_μkᵀ` with the recorded bases.
pub fn lift_r3_gmm(reduced: &ReducedQuatGmm) -> Result<TangentGmm> {
    let basis = tangent_basis(&reduced.attractor);
    let mut means = Vec::with_capacity(reduced.priors.len());
    let mut covs = Vec::with_capacity(reduced.priors.len());
    for k in 0..reduced.priors.len() {
        let mean = basis.lift(&reduced.means[k]);
        let norm = mean.norm();
        if norm >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::OutOfChart { norm });
        }
        means.push(mean);
        covs.push(reduced.bases[k].lift_covariance(&reduced.covariances[k]));
    }
    TangentGmm::new(reduced.attractor, reduced.priors.clone(), means, covs, reduced.ordering.clone())
}

/// Object pose and the end-effector offset recorded in the object frame; the
/// goal pose is `object_pose ∘ key_offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypose {
    pub object_pose: Pose,
    pub key_offset: Pose,
}

impl Keypose {
    pub fn target(&self) -> Result<Pose> {
        self.object_pose.compose(&self.key_offset)
    }

    /// Keypose whose target is `target` for an object at `object_pose`.
    pub fn from_target(object_pose: Pose, target: &Pose) -> Result<Self> {
        let key_offset = object_pose.inverse().compose(target)?;
        Ok(Self { object_pose, key_offset })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainData {
    /// Component averages plus chain waypoints.
    #[default]
    Summary,
    /// Every demonstration sample, carried by its component's motion.
    Demonstration,
}

/// Samples tagged with the component (= chain segment) that carries them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSamples {
    pub points: Vec<DVector<f64>>,
    pub rates: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    pub labels: Vec<usize>,
}

impl LabeledSamples {
    /// Hard-label averages; components without samples get their mixture
    /// mean and a zero rate with weight zero.
    pub fn summarize(gmm: &GmmModel, points: &[DVector<f64>], rates: &[DVector<f64>], labels: &[usize]) -> Self {
        let k = gmm.len();
        let d = gmm.dim();
        let mut sx = vec![DVector::zeros(d); k];
        let mut sv = vec![DVector::zeros(d); k];
        let mut n = vec![0usize; k];
        for ((x, v), l) in points.iter().zip(rates).zip(labels) {
            sx[*l] += x;
            sv[*l] += v;
            n[*l] += 1;
        }
        let mut out = LabeledSamples { points: vec![], rates: vec![], weights: vec![], labels: vec![] };
        for c in 0..k {
            if n[c] > 0 {
                out.points.push(&sx[c] / n[c] as f64);
                out.rates.push(&sv[c] / n[c] as f64);
            } else {
                out.points.push(gmm.components()[c].mean.clone());
                out.rates.push(DVector::zeros(d));
            }
            out.weights.push(n[c] as f64);
            out.labels.push(c);
        }
        out
    }

    fn transformed(&self, transforms: &[RigidTransform]) -> LabeledSamples {
        LabeledSamples {
            points: self.points.iter().zip(&self.labels).map(|(p, l)| transforms[*l].apply(p)).collect(),
            rates: self.rates.iter().zip(&self.labels).map(|(v, l)| transforms[*l].apply_vector(v)).collect(),
            weights: self.weights.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// Mean sample speed per label.
pub(crate) fn label_speeds(rates: &[DVector<f64>], labels: &[usize], k: usize) -> Vec<f64> {
    let mut sum = vec![0.0; k];
    let mut n = vec![0usize; k];
    for (v, l) in rates.iter().zip(labels) {
        sum[*l] += v.norm();
        n[*l] += 1;
    }
    (0..k).map(|c| if n[c] > 0 { sum[c] / n[c] as f64 } else { 0.0 }).collect()
}

/// What adaptation starts from: one space (positions, or the reduced chart of
/// the nominal orientation attractor).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NominalSpace {
    pub gmm: GmmModel,
    /// Absent when the joints coincide (e.g. a constant orientation).
    pub chain: Option<JointChain>,
    pub summary: LabeledSamples,
    /// Mean speed of the samples of each component.
    pub speeds: Vec<f64>,
    /// Present when retraining on the full demonstration.
    pub samples: Option<LabeledSamples>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefitSettings {
    pub retrain: RetrainData,
    pub pqlf: PqlfConfig,
    pub fit: SystemFitConfig,
}

/// The demonstration-derived state every adaptation is computed from, so
/// repeated adaptations never accumulate drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NominalState {
    pub start: Pose,
    pub target: Pose,
    pub position: NominalSpace,
    pub orientation: Option<NominalSpace>,
    pub settings: RefitSettings,
}

/// Training pairs for one space after an edit.
struct Retraining {
    gmm: GmmModel,
    points: Vec<DVector<f64>>,
    rates: Vec<DVector<f64>>,
    weights: Vec<f64>,
    /// Count-weighted component averages (the summary used for `P`).
    summary: LabeledSamples,
}

fn edit_space(space: &NominalSpace, constraints: &[GeometricConstraint], retrain: RetrainData) -> Result<Retraining> {
    let d = space.gmm.dim();
    let (new_chain, transforms) = match &space.chain {
        Some(chain) => {
            let edited = laplacian_edit(chain, constraints)?;
            let transforms = segment_transforms(chain, &edited)?;
            (Some(edited), transforms)
        }
        None => (None, vec![RigidTransform::identity(d); space.gmm.len()]),
    };
    let gmm = morph_with(&space.gmm, &transforms)?;
    let summary = space.summary.transformed(&transforms);
    let (mut points, mut rates, mut weights) = match (retrain, &space.samples) {
        (RetrainData::Demonstration, Some(samples)) => {
            let s = samples.transformed(&transforms);
            (s.points, s.rates, s.weights)
        }
        _ => (summary.points.clone(), summary.rates.clone(), summary.weights.iter().map(|w| w.min(1.0)).collect()),
    };
    if retrain == RetrainData::Summary {
        if let Some(chain) = &new_chain {
            let joints = chain.joints();
            for j in 0..chain.segments().min(space.speeds.len()) {
                let dir = &joints[j + 1] - &joints[j];
                points.push(joints[j].clone());
                rates.push(dir.normalize() * space.speeds[j]);
                weights.push(1.0);
            }
        }
    }
    Ok(Retraining { gmm, points, rates, weights, summary })
}

/// Rigid motion of the position space taking `from` to `to`.
fn relative_transform(from: &Pose, to: &Pose) -> Result<RigidTransform> {
    Ok(to.to_rigid()?.compose(&from.to_rigid()?.inverse()))
}

/// Builds the policy for goal `target` and start `start` from the nominal
/// state. Training is the special case `target = nominal.target`,
/// `start = nominal.start`.
pub(crate) fn realize(nominal: &Arc<NominalState>, target: &Pose, start: &Pose, dt: f64, provenance: Provenance) -> Result<Se3Policy> {
    let settings = &nominal.settings;
    let start_tf = relative_transform(&nominal.start, start)?;
    let end_tf = relative_transform(&nominal.target, target)?;
    let constraints = [GeometricConstraint::new(Anchor::Start, start_tf)?, GeometricConstraint::new(Anchor::End, end_tf.clone())?];

    let pos = edit_space(&nominal.position, &constraints, settings.retrain)?;
    let x_star = end_tf.apply(&nominal.target.position);
    let epsilon = default_epsilon(&pos.summary.points, &x_star);
    let p = match settings.retrain {
        RetrainData::Summary => {
            let keep: Vec<usize> = (0..pos.summary.weights.len()).filter(|i| pos.summary.weights[*i] > 0.0).collect();
            let xs: Vec<_> = keep.iter().map(|i| pos.summary.points[*i].clone()).collect();
            let vs: Vec<_> = keep.iter().map(|i| pos.summary.rates[*i].clone()).collect();
            let ws: Vec<_> = keep.iter().map(|i| pos.summary.weights[*i]).collect();
            solve_pqlf(&xs, &vs, Some(&ws), &x_star, epsilon, &settings.pqlf)?.lyapunov
        }
        RetrainData::Demonstration => solve_pqlf(&pos.points, &pos.rates, None, &x_star, epsilon, &settings.pqlf)?.lyapunov,
    };
    let margin = crate::dslearn::default_position_margin(&p);
    let fit = SystemFitConfig { euler_step: Some(dt), ..settings.fit };
    let systems = learn_lpv_systems_with(&pos.gmm, &pos.points, &pos.rates, Some(&pos.weights), &p, margin, &fit)?;
    let radius = pos.points.iter().map(|x| (x - &x_star).norm()).fold(0.0, f64::max);
    let position = PositionField::new(pos.gmm, systems, p, radius)?;

    let orientation = match &nominal.orientation {
        None => None,
        Some(space) => Some(realize_orientation(space, &nominal.target, target, start, settings)?),
    };
    Se3Policy::assemble(position, orientation, dt, provenance, Some(nominal.clone()))
}

/// The edit runs in the chart of the nominal attractor; the result is then
/// carried rigidly to the new attractor by left multiplication.
fn realize_orientation(space: &NominalSpace, nominal_target: &Pose, target: &Pose, start: &Pose, settings: &RefitSettings) -> Result<OrientationField> {
    let att = nominal_target.orientation;
    let basis = tangent_basis(&att);
    let q_rel = target.orientation.compose(&att.conjugate());
    let pulled_start = q_rel.conjugate().compose(&start.orientation);
    if pulled_start.dot(&att) <= 0.0 {
        return Err(Error::ProjectionDomain { angle: pulled_start.dot(&att).clamp(-1.0, 1.0).acos() });
    }
    let s = DVector::from_column_slice(basis.reduce(&quat_log(&att, &pulled_start).coords).as_slice());
    let mut constraints = vec![GeometricConstraint::new(Anchor::End, RigidTransform::identity(3))?];
    if let Some(chain) = &space.chain {
        constraints.push(GeometricConstraint::new(Anchor::Start, RigidTransform::translation(&s - &chain.joints()[0]))?);
    }
    let edited = edit_space(space, &constraints, settings.retrain)?;
    let nominal_frame = TangentGmm::from_reduced(att, &edited.gmm)?;
    let tgmm = nominal_frame.rotated(&q_rel)?;
    // Chart coordinates at the new attractor: r' = Λ'ᵀ L(q_rel) Λ r.
    let map = tgmm.basis().columns.transpose() * left_multiplication(&q_rel) * basis.columns;
    let map = DMatrix::from_column_slice(3, 3, map.as_slice());
    let points: Vec<DVector<f64>> = edited.points.iter().map(|p| &map * p).collect();
    let rates: Vec<DVector<f64>> = edited.rates.iter().map(|v| &map * v).collect();
    let gammas: Vec<Vec<f64>> = points.iter().map(|p| tgmm.reduced().mixing_weights(p).as_slice().to_vec()).collect();
    let systems = fit_systems(&points, &rates, &gammas, Some(&edited.weights), &DMatrix::identity(3, 3), ORIENTATION_MARGIN, &settings.fit)?;
    OrientationField::new(tgmm, systems)
}

/// Reshapes `policy` so its goal becomes the target of `new_keypose`; the
/// start moves to `new_start` when given. The input is left untouched.
pub fn adapt_policy(policy: &Se3Policy, new_keypose: &Keypose, new_start: Option<&Pose>) -> Result<Se3Policy> {
    adapt_to_target(policy, &new_keypose.target()?, new_start)
}

pub fn adapt_to_target(policy: &Se3Policy, target: &Pose, new_start: Option<&Pose>) -> Result<Se3Policy> {
    let nominal = policy
        .nominal()
        .ok_or_else(|| Error::InvalidInput("policy carries no nominal elastic state".into()))?;
    let start = new_start.unwrap_or(&nominal.start);
    if target.position.len() != nominal.target.position.len() || start.position.len() != nominal.start.position.len() {
        return Err(Error::DimensionMismatch { expected: nominal.target.position.len(), got: target.position.len() });
    }
    realize(nominal, target, start, policy.dt(), policy.provenance().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn comp(mean: &[f64], var: f64) -> GaussianComponent {
        GaussianComponent { prior: 1.0, mean: v(mean), cov: DMatrix::identity(mean.len(), mean.len()) * var }
    }

    fn gmm(comps: Vec<GaussianComponent>) -> GmmModel {
        let k = comps.len();
        let comps = comps.into_iter().map(|mut c| {
            c.prior = 1.0 / k as f64;
            c
        });
        GmmModel::new(comps.collect(), (0..k).collect()).unwrap()
    }

    fn wavy_chain(n: usize) -> JointChain {
        let joints = (0..n).map(|i| v(&[i as f64, (i as f64 * 0.7).sin(), 0.2 * i as f64 * (i % 2) as f64])).collect();
        let mut sources = vec![JointSource::Start];
        sources.extend((1..n - 1).map(|k| JointSource::Pair { left: k - 1, right: k }));
        sources.push(JointSource::Attractor);
        JointChain::new(joints, sources).unwrap()
    }

    #[test]
    fn joints_are_precision_weighted() {
        let (j, cov) = pair_joint(&comp(&[0.0, 0.0], 1.0), &comp(&[2.0, 4.0], 1.0)).unwrap();
        assert!((j - v(&[1.0, 2.0])).amax() < 1e-12);
        assert!((cov - DMatrix::identity(2, 2) * 0.5).amax() < 1e-12);
        let (j, _) = pair_joint(&comp(&[5.0, 0.0, 0.0], 4.0), &comp(&[0.0, 5.0, 0.0], 1.0)).unwrap();
        assert!((j - v(&[1.0, 4.0, 0.0])).amax() < 1e-12);
        let one = gmm(vec![comp(&[1.0, 1.0], 1.0)]);
        let chain = extract_joints(&one, &v(&[3.0, 3.0]), &v(&[0.0, 0.0])).unwrap();
        assert_eq!(chain.len(), 2);
    }

    #[test]
    fn identity_and_translation_edits() {
        let chain = wavy_chain(7);
        let id = [
            GeometricConstraint::new(Anchor::Start, RigidTransform::identity(3)).unwrap(),
            GeometricConstraint::new(Anchor::End, RigidTransform::identity(3)).unwrap(),
        ];
        let same = laplacian_edit(&chain, &id).unwrap();
        for (a, b) in same.joints().iter().zip(chain.joints()) {
            assert!((a - b).amax() < 1e-9);
        }
        let t = v(&[0.3, -1.0, 2.0]);
        let moved = [
            GeometricConstraint::new(Anchor::Start, RigidTransform::translation(t.clone())).unwrap(),
            GeometricConstraint::new(Anchor::End, RigidTransform::translation(t.clone())).unwrap(),
        ];
        let shifted = laplacian_edit(&chain, &moved).unwrap();
        for (a, b) in shifted.joints().iter().zip(chain.joints()) {
            assert!((a - b - &t).amax() < 1e-9);
        }
    }

    #[test]
    fn rotated_end_is_exact_and_optimal() {
        let chain = wavy_chain(8);
        let last = chain.len() - 1;
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2).into_inner();
        let end = RigidTransform::rotation_about(DMatrix::from_column_slice(3, 3, rot.as_slice()), &chain.joints()[last]);
        let cons = [
            GeometricConstraint::new(Anchor::Start, RigidTransform::identity(3)).unwrap(),
            GeometricConstraint::new(Anchor::End, end.clone()).unwrap(),
        ];
        let edited = laplacian_edit(&chain, &cons).unwrap();
        for i in [last - 1, last] {
            assert!((&edited.joints()[i] - end.apply(&chain.joints()[i])).norm() < 1e-9);
        }
        let l = path_laplacian(chain.len());
        let cost = |js: &[DVector<f64>]| {
            let a = DMatrix::from_fn(js.len(), 3, |i, c| js[i][c]);
            let b = DMatrix::from_fn(js.len(), 3, |i, c| chain.joints()[i][c]);
            (&l * (a - b)).norm()
        };
        let best = cost(edited.joints());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let mut js = edited.joints().to_vec();
            for j in js.iter_mut().take(last - 1).skip(2) {
                *j += DVector::from_fn(3, |_, _| rng.random_range(-0.1..0.1));
            }
            assert!(cost(&js) >= best - 1e-12);
        }
    }

    #[test]
    fn duplicate_anchors_conflict() {
        let chain = wavy_chain(4);
        let c = GeometricConstraint::new(Anchor::Start, RigidTransform::identity(3)).unwrap();
        assert!(matches!(laplacian_edit(&chain, &[c.clone(), c]), Err(Error::ConstraintConflict(_))));
    }

    #[test]
    fn morph_follows_rigid_motions() {
        let model = gmm(vec![comp(&[0.5, 0.2, 0.0], 0.1), comp(&[1.5, 0.8, 0.1], 0.2), comp(&[2.5, 0.9, 0.3], 0.05)]);
        let chain = extract_joints(&model, &v(&[0.0, 0.0, 0.0]), &v(&[3.0, 1.0, 0.2])).unwrap();
        let same = morph_gmm(&model, &chain, &chain).unwrap();
        assert_eq!(same, model);

        let t = v(&[1.0, 2.0, 3.0]);
        let moved = JointChain::new(chain.joints().iter().map(|j| j + &t).collect(), chain.sources().to_vec()).unwrap();
        let shifted = morph_gmm(&model, &chain, &moved).unwrap();
        for (a, b) in shifted.components().iter().zip(model.components()) {
            assert!((&a.mean - &b.mean - &t).amax() < 1e-12);
            assert!((&a.cov - &b.cov).amax() < 1e-12);
        }

        let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::new(0.3, -0.4, 1.0)), 0.9).into_inner();
        let r = DMatrix::from_column_slice(3, 3, r.as_slice());
        let rigid = RigidTransform::rotation_about(r.clone(), &chain.joints()[0]);
        let rotated = JointChain::new(chain.joints().iter().map(|j| rigid.apply(j)).collect(), chain.sources().to_vec()).unwrap();
        let turned = morph_gmm(&model, &chain, &rotated).unwrap();
        for (a, b) in turned.components().iter().zip(model.components()) {
            assert!((&a.mean - rigid.apply(&b.mean)).amax() < 1e-9);
            assert!((&a.cov - &r * &b.cov * r.transpose()).amax() < 1e-9);
        }
    }

    #[test]
    fn reduce_lift_round_trip() {
        let att = UnitQuaternion::from_axis_angle(&Vector3::new(1.0, 2.0, 0.5), 1.1);
        let basis = tangent_basis(&att);
        let reduced = gmm(vec![
            GaussianComponent { prior: 1.0, mean: v(&[0.3, -0.2, 0.1]), cov: DMatrix::from_row_slice(3, 3, &[0.02, 0.005, 0.0, 0.005, 0.01, 0.0, 0.0, 0.0, 0.03]) },
            comp(&[0.0, 0.0, 0.0], 0.01),
        ]);
        let tgmm = TangentGmm::from_reduced(att, &reduced).unwrap();
        let r = reduce_quat_gmm(&tgmm).unwrap();
        assert_eq!(r.means[1], Vector3::zeros());
        for k in 0..2 {
            assert!((r.means[k].norm() - tgmm.means()[k].norm()).abs() < 1e-12);
            assert!((basis.lift(&r.means[k]) - tgmm.means()[k]).amax() < 1e-12);
        }
        let back = lift_r3_gmm(&r).unwrap();
        for k in 0..2 {
            assert!((back.means()[k] - tgmm.means()[k]).amax() < 1e-9);
            assert!((back.covariances()[k] - tgmm.covariances()[k]).amax() < 1e-9);
            let mq = back.mean_quaternion(k).coords();
            assert!((back.covariances()[k] * mq).amax() < 1e-9);
        }
    }
}

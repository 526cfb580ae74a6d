//! Gaussian mixtures over positions and over quaternions projected on the
//! attractor tangent plane, fitted by EM with BIC model selection.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{clip_eigenvalues, symmetrize};
use crate::manifold::{quat_exp, quat_log, tangent_basis, transport_matrix, TangentBasis, UnitQuaternion};
use crate::trajectory::PoseTrajectory;
use crate::{Error, Result};

/// Minimum covariance eigenvalue kept after every M-step and on every model.
pub const COVARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent {
    pub prior: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Clone, Debug)]
struct Density {
    /// `log prior - 0.5 log det - 0.5 d log 2pi`
    log_norm: f64,
    /// Lower Cholesky factor of the covariance.
    chol: DMatrix<f64>,
}

impl Density {
    fn new(prior: f64, cov: &DMatrix<f64>) -> Result<Self> {
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?
            .l();
        let d = cov.nrows();
        let log_det: f64 = (0..d).map(|i| 2.0 * chol[(i, i)].ln()).sum();
        Ok(Self { log_norm: prior.ln() - 0.5 * log_det - 0.5 * d as f64 * LN_2PI, chol })
    }

    /// Squared Mahalanobis distance of `diff` (forward substitution).
    fn mahalanobis(&self, diff: &[f64]) -> f64 {
        let d = diff.len();
        let mut buf = [0.0_f64; 8];
        let mut heap;
        let y: &mut [f64] = if d <= 8 {
            &mut buf[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut acc = 0.0;
        for i in 0..d {
            let mut s = diff[i];
            for j in 0..i {
                s -= self.chol[(i, j)] * y[j];
            }
            y[i] = s / self.chol[(i, i)];
            acc += y[i] * y[i];
        }
        acc
    }
}

/// Mixture `{pi_k, mu_k, Sigma_k}`, components ordered along the reference
/// trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(into = "GmmDocument", try_from = "GmmDocument")]
pub struct GmmModel {
    components: Vec<GaussianComponent>,
    /// Index of each component's peak responsibility along the reference data.
    ordering: Vec<usize>,
    densities: Vec<Density>,
}

impl PartialEq for GmmModel {
    fn eq(&self, other: &Self) -> bool {
        self.components == other.components && self.ordering == other.ordering
    }
}

impl GmmModel {
    /// Validates and caches a mixture. Priors within 1e-6 of a unit sum are
    /// renormalized; covariances are symmetrized.
    pub fn new(mut components: Vec<GaussianComponent>, ordering: Vec<usize>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::InvalidInput("mixture needs at least one component".into()));
        };
        let dim = first.mean.len();
        if ordering.len() != components.len() {
            return Err(Error::InvalidInput("ordering length differs from component count".into()));
        }
        let total: f64 = components.iter().map(|c| c.prior).sum();
        if (total - 1.0).abs() > 1e-6 || components.iter().any(|c| !(c.prior > 0.0)) {
            return Err(Error::InvalidInput(format!("priors must be positive and sum to 1 (sum {total})")));
        }
        // Sums already within rounding of one are kept, so reloading a saved
        // mixture reproduces it bit for bit.
        let scale = if (total - 1.0).abs() > 1e-12 { total } else { 1.0 };
        for c in &mut components {
            if c.mean.len() != dim || c.cov.nrows() != dim || c.cov.ncols() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: c.mean.len() });
            }
            c.prior /= scale;
            c.cov = symmetrize(&c.cov);
        }
        let densities = components.iter().map(|c| Density::new(c.prior, &c.cov)).collect::<Result<_>>()?;
        Ok(Self { components, ordering, densities })
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    /// Per-component `log pi_k + log N(x; mu_k, Sigma_k)`.
    pub fn log_weighted_densities(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut diff = vec![0.0; d];
        self.components
            .iter()
            .zip(&self.densities)
            .map(|(c, dens)| {
                for i in 0..d {
                    diff[i] = x[i] - c.mean[i];
                }
                dens.log_norm - 0.5 * dens.mahalanobis(&diff)
            })
            .collect()
    }

    /// State-dependent mixing function `gamma_k(x)`. Evaluated with
    /// log-sum-exp; falls back to a one-hot on the nearest mean if every
    /// log-density is non-finite.
    pub fn mixing_weights(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        self.mixing_weights_into(x.as_slice(), out.as_mut_slice());
        out
    }

    pub fn mixing_weights_into(&self, x: &[f64], out: &mut [f64]) {
        let logs = self.log_weighted_densities(x);
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            out.fill(0.0);
            let nearest = self
                .components
                .iter()
                .enumerate()
                .map(|(k, c)| (k, c.mean.iter().zip(x).map(|(m, v)| (m - v) * (m - v)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map_or(0, |(k, _)| k);
            out[nearest] = 1.0;
            return;
        }
        let mut sum = 0.0;
        for (o, l) in out.iter_mut().zip(&logs) {
            *o = (l - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }

    /// Log-likelihood of a single point.
    pub fn log_likelihood(&self, x: &DVector<f64>) -> f64 {
        log_sum_exp(&self.log_weighted_densities(x.as_slice()))
    }

    /// Index of the component with the largest mixing weight.
    pub fn assign(&self, x: &DVector<f64>) -> usize {
        argmax(&self.log_weighted_densities(x.as_slice()))
    }
}

/// JSON layout shared by position and tangent mixtures.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmmDocument {
    pub dimension: usize,
    pub components: Vec<ComponentDocument>,
    pub ordering: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attractor: Option<UnitQuaternion>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComponentDocument {
    pub pi: f64,
    pub mean: Vec<f64>,
    pub cov_row_major: Vec<f64>,
}

impl ComponentDocument {
    fn from_parts(pi: f64, mean: &[f64], cov: &DMatrix<f64>) -> Self {
        let d = mean.len();
        let cov_row_major = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| cov[(i, j)]).collect();
        Self { pi, mean: mean.to_vec(), cov_row_major }
    }

    fn cov(&self, d: usize) -> Result<DMatrix<f64>> {
        if self.mean.len() != d || self.cov_row_major.len() != d * d {
            return Err(Error::DimensionMismatch { expected: d, got: self.mean.len() });
        }
        Ok(DMatrix::from_row_slice(d, d, &self.cov_row_major))
    }
}

impl From<GmmModel> for GmmDocument {
    fn from(m: GmmModel) -> Self {
        GmmDocument {
            dimension: m.dim(),
            components: m
                .components
                .iter()
                .map(|c| ComponentDocument::from_parts(c.prior, c.mean.as_slice(), &c.cov))
                .collect(),
            ordering: m.ordering.clone(),
            attractor: None,
        }
    }
}

impl TryFrom<GmmDocument> for GmmModel {
    type Error = Error;
    fn try_from(doc: GmmDocument) -> Result<Self> {
        let d = doc.dimension;
        let components = doc
            .components
            .iter()
            .map(|c| Ok(GaussianComponent { prior: c.pi, mean: DVector::from_vec(c.mean.clone()), cov: c.cov(d)? }))
            .collect::<Result<Vec<_>>>()?;
        GmmModel::new(components, doc.ordering)
    }
}

/// EM settings. Position fits cluster on `[position, unit velocity]` features
/// so that clusters follow the direction of motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmFitConfig {
    pub k_max: usize,
    pub restarts: usize,
    /// EM iterations given to each restart before the best one is refined.
    pub screen_iter: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Relative log-likelihood change that stops EM.
    pub tol: f64,
    pub position_weight: f64,
    pub direction_weight: f64,
}

impl Default for GmmFitConfig {
    fn default() -> Self {
        Self { k_max: 10, restarts: 10, screen_iter: 10, seed: 7, max_iter: 100, tol: 1e-6, position_weight: 1.0, direction_weight: 1.5 }
    }
}

impl GmmFitConfig {
    pub fn with_k_max(k_max: usize) -> Self {
        Self { k_max, ..Self::default() }
    }
}

/// Result of a fit: the model plus the hard assignment of every input sample.
#[derive(Clone, Debug)]
pub struct GmmFit {
    pub model: GmmModel,
    pub labels: Vec<usize>,
    pub bic: f64,
}

/// Fits a position mixture to one demonstration with default settings.
pub fn fit_position_gmm(traj: &PoseTrajectory, k_max: usize) -> Result<GmmModel> {
    if traj.len() < 10 {
        return Err(Error::InsufficientData(format!("need at least 10 samples, got {}", traj.len())));
    }
    Ok(fit_position_gmm_with(&traj.positions, &traj.velocities, &GmmFitConfig::with_k_max(k_max))?.model)
}

/// Fits a position mixture; the sample order of `positions` is the reference
/// order used to sort components.
pub fn fit_position_gmm_with(positions: &[DVector<f64>], velocities: &[DVector<f64>], config: &GmmFitConfig) -> Result<GmmFit> {
    let n = positions.len();
    if n == 0 || velocities.len() != n {
        return Err(Error::InsufficientData("positions and velocities must be nonempty and aligned".into()));
    }
    if config.k_max == 0 {
        return Err(Error::InvalidInput("k_max must be at least 1".into()));
    }
    let m = positions[0].len();
    let center = positions.iter().fold(DVector::zeros(m), |acc, p| acc + p) / n as f64;
    let spread = (positions.iter().map(|p| (p - &center).norm_squared()).sum::<f64>() / (n * m) as f64).sqrt();
    if !(spread > 1e-12) {
        return Err(Error::DegenerateData("all positions are identical".into()));
    }
    let scale = spread / config.position_weight;
    let d = 2 * m;
    let mut data = Vec::with_capacity(n * d);
    for (p, v) in positions.iter().zip(velocities) {
        data.extend((p - &center).iter().map(|x| x / scale));
        let speed = v.norm();
        let dir_scale = if speed > 1e-12 { config.direction_weight / speed } else { 0.0 };
        data.extend(v.iter().map(|x| x * dir_scale));
    }
    let run = select_by_bic(&Dataset { n, d, data }, config)?;
    let floor = COVARIANCE_FLOOR;
    let mut components = Vec::with_capacity(run.k);
    for k in 0..run.k {
        let mean = DVector::from_iterator(m, run.means[k][..m].iter().map(|x| x * scale)) + &center;
        let cov = run.covs[k].view((0, 0), (m, m)).into_owned() * (scale * scale);
        components.push(GaussianComponent { prior: run.priors[k], mean, cov: clip_eigenvalues(&cov, floor, f64::INFINITY) });
    }
    finish_fit(components, &run)
}

/// Position-fit result reordered temporally.
fn finish_fit(components: Vec<GaussianComponent>, run: &EmRun) -> Result<GmmFit> {
    let (order, peaks) = temporal_order(&run.resp, run.n, run.k);
    let mut rank = vec![0; run.k];
    for (new, old) in order.iter().enumerate() {
        rank[*old] = new;
    }
    let components: Vec<_> = order.iter().map(|k| components[*k].clone()).collect();
    let ordering: Vec<_> = order.iter().map(|k| peaks[*k]).collect();
    let labels = (0..run.n).map(|i| rank[argmax(&run.resp[i * run.k..(i + 1) * run.k])]).collect();
    Ok(GmmFit { model: GmmModel::new(components, ordering)?, labels, bic: run.bic })
}

/// Components sorted by the sample index of their peak responsibility, ties
/// broken by first occurrence (then by component index).
fn temporal_order(resp: &[f64], n: usize, k: usize) -> (Vec<usize>, Vec<usize>) {
    let peaks: Vec<usize> = (0..k)
        .map(|c| {
            let mut best = 0;
            for i in 1..n {
                if resp[i * k + c] > resp[best * k + c] {
                    best = i;
                }
            }
            best
        })
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|c| (peaks[*c], *c));
    (order, peaks)
}

/// Mixture over quaternions expressed on the tangent plane of the attractor.
///
/// Means are tangent vectors at the attractor; each covariance lives in the
/// tangent space of its own mean quaternion `exp_att(mean)`, so the mean
/// quaternion spans the covariance null space.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(into = "GmmDocument", try_from = "GmmDocument")]
pub struct TangentGmm {
    attractor: UnitQuaternion,
    priors: Vec<f64>,
    means: Vec<Vector4<f64>>,
    covs: Vec<Matrix4<f64>>,
    ordering: Vec<usize>,
    basis: TangentBasis,
    /// Equivalent 3-D mixture in the coordinates of `basis`, used for `gamma_k`.
    reduced: GmmModel,
}

impl PartialEq for TangentGmm {
    fn eq(&self, other: &Self) -> bool {
        self.attractor == other.attractor && self.priors == other.priors && self.means == other.means && self.covs == other.covs
    }
}

impl TangentGmm {
    pub fn new(
        attractor: UnitQuaternion,
        priors: Vec<f64>,
        means: Vec<Vector4<f64>>,
        covs: Vec<Matrix4<f64>>,
        ordering: Vec<usize>,
    ) -> Result<Self> {
        if means.len() != priors.len() || covs.len() != priors.len() {
            return Err(Error::InvalidInput("tangent mixture parts differ in length".into()));
        }
        let basis = tangent_basis(&attractor);
        let att = attractor.coords();
        let mut components = Vec::with_capacity(priors.len());
        let mut covs_out = Vec::with_capacity(covs.len());
        for ((prior, mean), cov) in priors.iter().zip(&means).zip(&covs) {
            let deviation = mean.dot(&att).abs();
            if deviation > 1e-8 {
                return Err(Error::InvalidTangent { deviation });
            }
            if mean.norm() >= std::f64::consts::FRAC_PI_2 {
                return Err(Error::OutOfChart { norm: mean.norm() });
            }
            let mean_q = quat_exp(&attractor, mean)?;
            let cov = (cov + cov.transpose()) * 0.5;
            let back = transport_matrix(&mean_q, &attractor)?;
            let at_attractor = back * cov * back.transpose();
            let reduced_cov = basis.reduce_covariance(&at_attractor);
            let reduced_cov = clip_eigenvalues(&DMatrix::from_column_slice(3, 3, reduced_cov.as_slice()), COVARIANCE_FLOOR, f64::INFINITY);
            components.push(GaussianComponent {
                prior: *prior,
                mean: DVector::from_column_slice(basis.reduce(mean).as_slice()),
                cov: reduced_cov,
            });
            covs_out.push(cov);
        }
        let reduced = GmmModel::new(components, ordering.clone())?;
        let priors = reduced.components().iter().map(|c| c.prior).collect();
        Ok(Self { attractor, priors, means, covs: covs_out, ordering, basis, reduced })
    }

    /// Builds a tangent mixture from a 3-D mixture expressed in the
    /// coordinates of `tangent_basis(attractor)`; each covariance is carried
    /// to its mean quaternion by parallel transport.
    pub fn from_reduced(attractor: UnitQuaternion, reduced: &GmmModel) -> Result<Self> {
        if reduced.dim() != 3 {
            return Err(Error::DimensionMismatch { expected: 3, got: reduced.dim() });
        }
        let basis = tangent_basis(&attractor);
        let mut priors = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for c in reduced.components() {
            let mean = basis.lift(&Vector3::from_column_slice(c.mean.as_slice()));
            let mean_q = quat_exp(&attractor, &mean)?;
            let t = transport_matrix(&attractor, &mean_q)?;
            let cov3 = Matrix3::from_column_slice(c.cov.as_slice());
            priors.push(c.prior);
            means.push(mean);
            covs.push(t * basis.lift_covariance(&cov3) * t.transpose());
        }
        Self::new(attractor, priors, means, covs, reduced.ordering().to_vec())
    }

    pub fn attractor(&self) -> UnitQuaternion {
        self.attractor
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn means(&self) -> &[Vector4<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Matrix4<f64>] {
        &self.covs
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    pub fn basis(&self) -> &TangentBasis {
        &self.basis
    }

    /// The mixture in the 3-D coordinates of [`Self::basis`].
    pub fn reduced(&self) -> &GmmModel {
        &self.reduced
    }

    pub fn mean_quaternion(&self, k: usize) -> UnitQuaternion {
        quat_exp(&self.attractor, &self.means[k]).unwrap_or(self.attractor)
    }

    pub fn mixing_weights(&self, q: &UnitQuaternion) -> DVector<f64> {
        self.mixing_weights_tangent(&quat_log(&self.attractor, q).coords)
    }

    /// `gamma_k` at a tangent vector of the attractor.
    pub fn mixing_weights_tangent(&self, v: &Vector4<f64>) -> DVector<f64> {
        let r = self.basis.reduce(v);
        self.reduced.mixing_weights(&DVector::from_column_slice(r.as_slice()))
    }

    /// The mixture carried rigidly by left multiplication with `q`; the new
    /// attractor is `q ∘ attractor`.
    pub fn rotated(&self, q: &UnitQuaternion) -> Result<TangentGmm> {
        let l = crate::manifold::left_multiplication(q);
        let means = self.means.iter().map(|m| l * m).collect();
        let covs = self.covs.iter().map(|c| l * c * l.transpose()).collect();
        TangentGmm::new(q.compose(&self.attractor), self.priors.clone(), means, covs, self.ordering.clone())
    }
}

impl From<TangentGmm> for GmmDocument {
    fn from(m: TangentGmm) -> Self {
        GmmDocument {
            dimension: 4,
            components: (0..m.len())
                .map(|k| {
                    let cov = DMatrix::from_column_slice(4, 4, m.covs[k].as_slice());
                    ComponentDocument::from_parts(m.priors[k], m.means[k].as_slice(), &cov)
                })
                .collect(),
            ordering: m.ordering.clone(),
            attractor: Some(m.attractor),
        }
    }
}

impl TryFrom<GmmDocument> for TangentGmm {
    type Error = Error;
    fn try_from(doc: GmmDocument) -> Result<Self> {
        let attractor = doc.attractor.ok_or_else(|| Error::InvalidInput("tangent mixture needs an attractor".into()))?;
        if doc.dimension != 4 {
            return Err(Error::DimensionMismatch { expected: 4, got: doc.dimension });
        }
        let mut priors = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for c in &doc.components {
            let cov = c.cov(4)?;
            priors.push(c.pi);
            means.push(Vector4::from_column_slice(&c.mean));
            covs.push(Matrix4::from_column_slice(cov.as_slice()));
        }
        TangentGmm::new(attractor, priors, means, covs, doc.ordering)
    }
}

/// Fits a tangent-plane mixture to a quaternion sequence with default settings.
pub fn fit_quat_gmm(quats: &[UnitQuaternion], q_att: &UnitQuaternion, k_max: usize) -> Result<TangentGmm> {
    Ok(fit_quat_gmm_with(quats, q_att, &GmmFitConfig::with_k_max(k_max))?.0)
}

/// Fits on the attractor logs `Λᵀ log_att(q_i)`. Every sample must lie in the
/// open half-sphere around `q_att`. Also returns per-sample labels.
pub fn fit_quat_gmm_with(quats: &[UnitQuaternion], q_att: &UnitQuaternion, config: &GmmFitConfig) -> Result<(TangentGmm, Vec<usize>)> {
    if quats.is_empty() {
        return Err(Error::InsufficientData("no quaternions".into()));
    }
    if config.k_max == 0 {
        return Err(Error::InvalidInput("k_max must be at least 1".into()));
    }
    let basis = tangent_basis(q_att);
    let mut points = Vec::with_capacity(quats.len());
    for q in quats {
        let c = q.dot(q_att);
        if c <= 0.0 {
            return Err(Error::ProjectionDomain { angle: c.clamp(-1.0, 1.0).acos() });
        }
        points.push(basis.reduce(&quat_log(q_att, q).coords));
    }
    let n = points.len();
    let spread = points.iter().map(|p| (p - points[0]).norm()).fold(0.0, f64::max);
    let (reduced, labels) = if spread <= 1e-12 {
        let comp = GaussianComponent {
            prior: 1.0,
            mean: DVector::from_column_slice(points[0].as_slice()),
            cov: DMatrix::identity(3, 3) * COVARIANCE_FLOOR,
        };
        (GmmModel::new(vec![comp], vec![0])?, vec![0; n])
    } else {
        let data = Dataset { n, d: 3, data: points.iter().flat_map(|p| p.iter().copied()).collect() };
        let run = select_by_bic(&data, config)?;
        let components = (0..run.k)
            .map(|k| GaussianComponent {
                prior: run.priors[k],
                mean: DVector::from_vec(run.means[k].clone()),
                cov: clip_eigenvalues(&run.covs[k], COVARIANCE_FLOOR, f64::INFINITY),
            })
            .collect();
        let fit = finish_fit(components, &run)?;
        (fit.model, fit.labels)
    };
    Ok((TangentGmm::from_reduced(*q_att, &reduced)?, labels))
}

/// Row-major samples.
struct Dataset {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl Dataset {
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

struct EmRun {
    n: usize,
    k: usize,
    priors: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<DMatrix<f64>>,
    log_likelihood: f64,
    bic: f64,
    /// Row-major `n x k` responsibilities of the final model.
    resp: Vec<f64>,
}

fn select_by_bic(data: &Dataset, config: &GmmFitConfig) -> Result<EmRun> {
    let k_max = config.k_max.min(data.n).max(1);
    let mut best: Option<EmRun> = None;
    for k in 1..=k_max {
        let run = best_of_restarts(data, k, config)?;
        if best.as_ref().is_none_or(|b| run.bic < b.bic) {
            best = Some(run);
        }
    }
    best.ok_or_else(|| Error::Numerical("no mixture could be fitted".into()))
}

fn best_of_restarts(data: &Dataset, k: usize, config: &GmmFitConfig) -> Result<EmRun> {
    let restarts = if k == 1 { 1 } else { config.restarts.max(1) };
    let global = m_step_single(data);
    let screen = if restarts == 1 { config.max_iter } else { config.screen_iter.min(config.max_iter) };
    let run_one = |r: usize| {
        let seed = config.seed ^ ((k as u64) << 32) ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let params = em_init(data, k, &mut ChaCha8Rng::seed_from_u64(seed), &global);
        em(data, params, &global, screen, config.tol)
    };
    #[cfg(feature = "parallel")]
    let runs: Vec<Result<EmRun>> = {
        use rayon::prelude::*;
        (0..restarts).into_par_iter().map(run_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let runs: Vec<Result<EmRun>> = (0..restarts).map(run_one).collect();

    let mut best: Option<EmRun> = None;
    let mut last_err = None;
    for run in runs {
        match run {
            Ok(run) => {
                if best.as_ref().is_none_or(|b| run.log_likelihood > b.log_likelihood) {
                    best = Some(run);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let best = best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Numerical("EM failed".into())))?;
    if screen >= config.max_iter {
        return Ok(best);
    }
    let params = Params { priors: best.priors, means: best.means, covs: best.covs };
    em(data, params, &global, config.max_iter - screen, config.tol)
}

/// k-means++ seeds, hard-assigned, then one M-step.
fn em_init(data: &Dataset, k: usize, rng: &mut ChaCha8Rng, global: &(Vec<f64>, DMatrix<f64>)) -> Params {
    let n = data.n;
    let seeds = kmeans_pp(data, k, rng);
    let mut resp = vec![0.0; n * k];
    for i in 0..n {
        let x = data.row(i);
        let nearest = (0..k)
            .map(|c| (c, sq_dist(x, &seeds[c])))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map_or(0, |(c, _)| c);
        resp[i * k + nearest] = 1.0;
    }
    m_step(data, &resp, k, global)
}

fn em(data: &Dataset, mut params: Params, global: &(Vec<f64>, DMatrix<f64>), max_iter: usize, tol: f64) -> Result<EmRun> {
    let (n, d) = (data.n, data.d);
    let k = params.priors.len();
    let mut resp = vec![0.0; n * k];
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..max_iter.max(1) {
        let log_likelihood = e_step(data, &params, &mut resp)?;
        params = m_step(data, &resp, k, global);
        if (log_likelihood - prev_ll).abs() <= tol * log_likelihood.abs().max(1.0) {
            break;
        }
        prev_ll = log_likelihood;
    }
    let log_likelihood = e_step(data, &params, &mut resp)?;
    let free = (k - 1) + k * d + k * d * (d + 1) / 2;
    let bic = -2.0 * log_likelihood + free as f64 * (n as f64).ln();
    Ok(EmRun { n, k, priors: params.priors, means: params.means, covs: params.covs, log_likelihood, bic, resp })
}

struct Params {
    priors: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<DMatrix<f64>>,
}

fn m_step_single(data: &Dataset) -> (Vec<f64>, DMatrix<f64>) {
    let ones = vec![1.0; data.n];
    let p = m_step(data, &ones, 1, &(vec![0.0; data.d], DMatrix::identity(data.d, data.d)));
    (p.means[0].clone(), p.covs[0].clone())
}

fn m_step(data: &Dataset, resp: &[f64], k: usize, fallback: &(Vec<f64>, DMatrix<f64>)) -> Params {
    let (n, d) = (data.n, data.d);
    let mut weights = vec![0.0; k];
    let mut means = vec![vec![0.0; d]; k];
    for i in 0..n {
        let x = data.row(i);
        for c in 0..k {
            let r = resp[i * k + c];
            if r == 0.0 {
                continue;
            }
            weights[c] += r;
            for j in 0..d {
                means[c][j] += r * x[j];
            }
        }
    }
    let mut covs = vec![vec![0.0; d * d]; k];
    for c in 0..k {
        if weights[c] > 1e-10 {
            means[c].iter_mut().for_each(|m| *m /= weights[c]);
        }
    }
    let mut diff = vec![0.0; d];
    for i in 0..n {
        let x = data.row(i);
        for c in 0..k {
            let r = resp[i * k + c];
            if r == 0.0 {
                continue;
            }
            for j in 0..d {
                diff[j] = x[j] - means[c][j];
            }
            let cov = &mut covs[c];
            for a in 0..d {
                let ra = r * diff[a];
                for b in 0..=a {
                    cov[a * d + b] += ra * diff[b];
                }
            }
        }
    }
    let mut out_covs = Vec::with_capacity(k);
    for c in 0..k {
        let mut m = DMatrix::zeros(d, d);
        if weights[c] > 1e-10 {
            for a in 0..d {
                for b in 0..=a {
                    let v = covs[c][a * d + b] / weights[c];
                    m[(a, b)] = v;
                    m[(b, a)] = v;
                }
            }
        } else {
            // Emptied component: park it on the global statistics.
            means[c] = fallback.0.clone();
            m = fallback.1.clone();
        }
        for a in 0..d {
            m[(a, a)] += COVARIANCE_FLOOR;
        }
        out_covs.push(m);
    }
    let total: f64 = weights.iter().sum();
    let priors = weights.iter().map(|w| (w / total).max(1e-12)).collect();
    Params { priors, means, covs: out_covs }
}

/// Fills responsibilities, returns the total log-likelihood.
fn e_step(data: &Dataset, params: &Params, resp: &mut [f64]) -> Result<f64> {
    let (n, d) = (data.n, data.d);
    let k = params.priors.len();
    let densities: Vec<Density> = (0..k).map(|c| Density::new(params.priors[c], &params.covs[c])).collect::<Result<_>>()?;
    let mut diff = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..n {
        let x = data.row(i);
        let row = &mut resp[i * k..(i + 1) * k];
        for c in 0..k {
            for j in 0..d {
                diff[j] = x[j] - params.means[c][j];
            }
            row[c] = densities[c].log_norm - 0.5 * densities[c].mahalanobis(&diff);
        }
        let lse = log_sum_exp(row);
        total += lse;
        for r in row.iter_mut() {
            *r = (*r - lse).exp();
        }
    }
    Ok(total)
}

fn kmeans_pp(data: &Dataset, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = data.n;
    let mut centers = vec![data.row(rng.random_range(0..n)).to_vec()];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in dist.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = data.row(idx).to_vec();
        for i in 0..n {
            dist[i] = dist[i].min(sq_dist(data.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn line(n: usize) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let pos = (0..n).map(|i| DVector::from_vec(vec![i as f64 * 0.01, 0.5 * i as f64 * 0.01])).collect();
        let vel = (0..n).map(|_| DVector::from_vec(vec![1.0, 0.5])).collect();
        (pos, vel)
    }

    #[test]
    fn single_component_mean_is_centroid() {
        let (pos, vel) = line(100);
        let times = (0..100).map(|i| i as f64 * 0.01).collect();
        let traj = PoseTrajectory::new(times, pos.clone(), vel, vec![]).unwrap();
        let gmm = fit_position_gmm(&traj, 1).unwrap();
        assert_eq!(gmm.len(), 1);
        let centroid = pos.iter().fold(DVector::zeros(2), |a, p| a + p) / 100.0;
        assert!((&gmm.components()[0].mean - centroid).norm() < 1e-6);
        assert!((gmm.components()[0].prior - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_positions_rejected() {
        let pos = vec![DVector::from_vec(vec![1.0, 1.0]); 20];
        let vel = vec![DVector::from_vec(vec![0.0, 0.0]); 20];
        let err = fit_position_gmm_with(&pos, &vel, &GmmFitConfig::default());
        assert!(matches!(err, Err(Error::DegenerateData(_))));
    }

    #[test]
    fn too_short_trajectory_rejected() {
        let (pos, vel) = line(5);
        let traj = PoseTrajectory::new((0..5).map(|i| i as f64).collect(), pos, vel, vec![]).unwrap();
        assert!(matches!(fit_position_gmm(&traj, 3), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn mixing_weights_single_component() {
        let comp = GaussianComponent { prior: 1.0, mean: DVector::zeros(2), cov: DMatrix::identity(2, 2) };
        let gmm = GmmModel::new(vec![comp], vec![0]).unwrap();
        let w = gmm.mixing_weights(&DVector::from_vec(vec![1e9, -3.0]));
        assert_eq!(w.as_slice(), &[1.0]);
    }

    #[test]
    fn mixing_weights_far_field_is_simplex() {
        let comps = vec![
            GaussianComponent { prior: 0.5, mean: DVector::from_vec(vec![0.0, 0.0]), cov: DMatrix::identity(2, 2) * 0.01 },
            GaussianComponent { prior: 0.5, mean: DVector::from_vec(vec![1.0, 0.0]), cov: DMatrix::identity(2, 2) * 0.02 },
        ];
        let gmm = GmmModel::new(comps, vec![0, 1]).unwrap();
        for x in [1e5, 1e6, -1e7] {
            let w = gmm.mixing_weights(&DVector::from_vec(vec![x, x * 0.3]));
            assert!((w.sum() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn json_layout_and_round_trip() {
        let comps = vec![
            GaussianComponent { prior: 0.25, mean: DVector::from_vec(vec![0.0, 1.0]), cov: DMatrix::identity(2, 2) },
            GaussianComponent {
                prior: 0.75,
                mean: DVector::from_vec(vec![2.0, 1.0]),
                cov: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            },
        ];
        let gmm = GmmModel::new(comps, vec![3, 40]).unwrap();
        let json = serde_json::to_value(&gmm).unwrap();
        assert_eq!(json["dimension"], 2);
        assert_eq!(json["components"][1]["cov_row_major"], serde_json::json!([2.0, 0.5, 0.5, 1.0]));
        assert_eq!(json["components"][0]["pi"], 0.25);
        assert!(json.get("attractor").is_none());
        let back: GmmModel = serde_json::from_value(json).unwrap();
        assert_eq!(back, gmm);
    }

    #[test]
    fn constant_quaternions_give_floor_component() {
        let att = UnitQuaternion::new(0.9, 0.1, -0.3, 0.2).unwrap();
        let tg = fit_quat_gmm(&vec![att; 30], &att, 4).unwrap();
        assert_eq!(tg.len(), 1);
        assert!(tg.means()[0].norm() < 1e-15);
        let reduced = &tg.reduced().components()[0].cov;
        assert!((reduced - DMatrix::identity(3, 3) * COVARIANCE_FLOOR).norm() < 1e-15);
    }

    #[test]
    fn quaternion_outside_half_sphere_rejected() {
        let att = UnitQuaternion::IDENTITY;
        let far = UnitQuaternion::from_axis_angle(&Vector3::x(), 3.0);
        let err = fit_quat_gmm(&[att, far.negated()], &att, 2);
        assert!(matches!(err, Err(Error::ProjectionDomain { .. })));
    }

    #[test]
    fn tangent_gmm_json_round_trip() {
        let att = UnitQuaternion::from_axis_angle(&Vector3::new(0.2, 1.0, 0.1), 0.4);
        let quats: Vec<_> = (0..60)
            .map(|i| UnitQuaternion::from_axis_angle(&Vector3::new(1.0, 0.2, 0.0), 0.02 * i as f64).compose(&att))
            .collect();
        let tg = fit_quat_gmm(&quats, &att, 3).unwrap();
        let json = serde_json::to_string(&tg).unwrap();
        let back: TangentGmm = serde_json::from_str(&json).unwrap();
        assert_eq!(back.attractor(), tg.attractor());
        for (a, b) in back.means().iter().zip(tg.means()) {
            assert!((a - b).norm() < 1e-15);
        }
    }
}

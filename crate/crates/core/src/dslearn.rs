//! Stable linear systems behind the position and orientation fields, field
//! evaluation, and Euler rollouts of a full-pose policy.
//!
//! Both fits solve
//!
//! ```text
//! min  Σ_i w_i ‖y_i − Σ_k γ_k(i) A_k e_i‖²   s.t.  A_kᵀM + M A_k ⪯ −δ I
//! ```
//!
//! with `M = P` for positions and `M = I` for orientations. The constraint
//! bounds the symmetric part of `M A_k`, which is linear in `A_k`. The
//! problem is small (`K·d²` unknowns) and is solved by a log-det barrier
//! method with Newton centering. Iterates stay strictly feasible, so the
//! certificate holds even when the step cap is hit.

use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::linalg::{max_eigenvalue, min_eigenvalue, spectral_norm, symmetrize};
use crate::lyapunov::LyapunovP;
use crate::manifold::{parallel_transport, quat_exp, quat_log, UnitQuaternion};
use crate::mixture::{GmmModel, TangentGmm};
use crate::policy::{Pose, Se3Policy};
use crate::trajectory::PoseTrajectory;
use crate::{Error, Result};

/// Position margin is this times `‖P‖₂`.
pub const POSITION_MARGIN_SCALE: f64 = 1e-4;
pub const ORIENTATION_MARGIN: f64 = 1e-4;
/// Absolute slack (scaled by `max(1, ‖M‖‖A‖)`) accepted by the certificate check.
pub const CERTIFICATE_TOLERANCE: f64 = 1e-8;

pub fn default_position_margin(lyapunov: &LyapunovP) -> f64 {
    POSITION_MARGIN_SCALE * spectral_norm(lyapunov.matrix())
}

/// Linear systems `{A_k}` together with the metric `M` of their certificate
/// `A_kᵀM + MA_k ⪯ −margin·I`.
#[derive(Clone, Debug)]
pub struct LinearSystems {
    matrices: Vec<DMatrix<f64>>,
    metric: DMatrix<f64>,
    margin: f64,
    fit: Option<FitReport>,
}

impl PartialEq for LinearSystems {
    /// Ignores the fit report.
    fn eq(&self, other: &Self) -> bool {
        self.matrices == other.matrices && self.metric == other.metric && self.margin == other.margin
    }
}

/// Diagnostics of a fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Weighted mean of `‖y_i − f(e_i)‖²` at the returned matrices.
    pub mse: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LinearSystems {
    /// Validates shapes and the certificate.
    pub fn new(matrices: Vec<DMatrix<f64>>, metric: DMatrix<f64>, margin: f64) -> Result<Self> {
        let d = metric.nrows();
        if matrices.is_empty() {
            return Err(Error::InvalidInput("no linear systems".into()));
        }
        if metric.ncols() != d || matrices.iter().any(|a| a.nrows() != d || a.ncols() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: matrices[0].nrows() });
        }
        if !(margin > 0.0) {
            return Err(Error::InvalidInput("stability margin must be positive".into()));
        }
        let systems = Self { matrices, metric, margin, fit: None };
        let worst = systems.worst_certificate_gap();
        if worst > 0.0 {
            return Err(Error::Infeasible(format!("linear system violates its certificate by {worst:e}")));
        }
        Ok(systems)
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.metric.nrows()
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn metric(&self) -> &DMatrix<f64> {
        &self.metric
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn fit_report(&self) -> Option<FitReport> {
        self.fit
    }

    /// Largest eigenvalue of `A_kᵀM + MA_k` for each k.
    pub fn certificate_eigenvalues(&self) -> Vec<f64> {
        self.matrices.iter().map(|a| max_eigenvalue(&(a.transpose() * &self.metric + &self.metric * a))).collect()
    }

    /// `max_k λmax(A_kᵀM + MA_k) + margin − tolerance`; nonpositive when the
    /// certificate holds.
    fn worst_certificate_gap(&self) -> f64 {
        let m = spectral_norm(&self.metric);
        self.matrices
            .iter()
            .zip(self.certificate_eigenvalues())
            .map(|(a, top)| top + self.margin - CERTIFICATE_TOLERANCE * (m * spectral_norm(a)).max(1.0))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `Σ_k γ_k A_k e`.
    pub fn apply(&self, gamma: &[f64], e: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(e.len());
        for (g, a) in gamma.iter().zip(&self.matrices) {
            if *g != 0.0 {
                out.gemv(*g, a, e, 1.0);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemFitConfig {
    /// Newton step cap over the whole barrier path.
    pub max_iter: usize,
    /// Suboptimality bound, relative to the mean squared target.
    pub tol: f64,
    /// When set, the systems are also certified for explicit Euler steps up
    /// to this length.
    #[serde(default)]
    pub euler_step: Option<f64>,
    /// Ridge weight toward an isotropic contraction, relative to the mean
    /// diagonal of the normal matrix.
    pub ridge: f64,
}

impl Default for SystemFitConfig {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-10, euler_step: None, ridge: 1e-3 }
    }
}

/// Fits the position systems with the default configuration.
pub fn learn_lpv_systems(
    gmm: &GmmModel,
    positions: &[DVector<f64>],
    velocities: &[DVector<f64>],
    lyapunov: &LyapunovP,
    margin: f64,
) -> Result<LinearSystems> {
    learn_lpv_systems_with(gmm, positions, velocities, None, lyapunov, margin, &SystemFitConfig::default())
}

pub fn learn_lpv_systems_with(
    gmm: &GmmModel,
    positions: &[DVector<f64>],
    velocities: &[DVector<f64>],
    weights: Option<&[f64]>,
    lyapunov: &LyapunovP,
    margin: f64,
    config: &SystemFitConfig,
) -> Result<LinearSystems> {
    let d = lyapunov.dim();
    if positions.is_empty() || positions.len() != velocities.len() {
        return Err(Error::InsufficientData("position fit needs matching, nonempty data".into()));
    }
    if gmm.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: gmm.dim() });
    }
    if let Some(bad) = positions.iter().chain(velocities).find(|v| v.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: bad.len() });
    }
    let x_star = lyapunov.attractor();
    let mut gammas = Vec::with_capacity(positions.len());
    let mut buf = vec![0.0; gmm.len()];
    for x in positions {
        gmm.mixing_weights_into(x.as_slice(), &mut buf);
        gammas.push(buf.clone());
    }
    let errors: Vec<DVector<f64>> = positions.iter().map(|x| x - x_star).collect();
    fit_systems(&errors, velocities, &gammas, weights, lyapunov.matrix(), margin, config)
}

/// Fits the orientation systems with the default configuration.
pub fn learn_quat_systems(tgmm: &TangentGmm, quats: &[UnitQuaternion], q_att: &UnitQuaternion, dt: f64, margin: f64) -> Result<LinearSystems> {
    learn_quat_systems_with(tgmm, quats, q_att, dt, margin, &SystemFitConfig::default())
}

/// Training pairs are the reduced attractor logs `r_i = Λᵀ log_att(q_i)` and
/// the rates `(r_{i+1} − r_i) / dt`, so the matrices are in 1/s and one policy
/// step of length `h` displaces the tangent point by `h Σ γ_k A_k r`.
pub fn learn_quat_systems_with(
    tgmm: &TangentGmm,
    quats: &[UnitQuaternion],
    q_att: &UnitQuaternion,
    dt: f64,
    margin: f64,
    config: &SystemFitConfig,
) -> Result<LinearSystems> {
    if quats.len() < 2 {
        return Err(Error::InsufficientData("orientation fit needs at least two quaternions".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidInput("dt must be positive".into()));
    }
    if tgmm.attractor().dot(q_att).abs() < 1.0 - 1e-12 {
        return Err(Error::InvalidInput("mixture attractor differs from q_att".into()));
    }
    let basis = tgmm.basis();
    let mut reduced = Vec::with_capacity(quats.len());
    for q in quats {
        let c = q.dot(q_att);
        if c <= 0.0 {
            return Err(Error::ProjectionDomain { angle: c.clamp(-1.0, 1.0).acos() });
        }
        reduced.push(DVector::from_column_slice(basis.reduce(&quat_log(q_att, q).coords).as_slice()));
    }
    let features = &reduced[..reduced.len() - 1];
    let targets: Vec<DVector<f64>> = reduced.windows(2).map(|w| (&w[1] - &w[0]) / dt).collect();
    let gammas: Vec<Vec<f64>> = features.iter().map(|r| tgmm.reduced().mixing_weights(r).as_slice().to_vec()).collect();
    fit_systems(features, &targets, &gammas, None, &DMatrix::identity(3, 3), margin, config)
}

/// Solves the constrained least squares described in the module docs.
pub(crate) fn fit_systems(
    features: &[DVector<f64>],
    targets: &[DVector<f64>],
    gammas: &[Vec<f64>],
    weights: Option<&[f64]>,
    metric: &DMatrix<f64>,
    margin: f64,
    config: &SystemFitConfig,
) -> Result<LinearSystems> {
    let n = features.len();
    let d = metric.nrows();
    if n == 0 || targets.len() != n || gammas.len() != n {
        return Err(Error::InsufficientData("system fit needs matching, nonempty data".into()));
    }
    let k = gammas[0].len();
    let w: Vec<f64> = match weights {
        Some(w) if w.len() == n && w.iter().all(|v| *v >= 0.0 && v.is_finite()) => w.to_vec(),
        Some(_) => return Err(Error::InvalidInput("weights must be finite, nonnegative and one per sample".into())),
        None => vec![1.0; n],
    };
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InsufficientData("all sample weights are zero".into()));
    }
    if !(margin > 0.0) {
        return Err(Error::InvalidInput("stability margin must be positive".into()));
    }
    let lam_min = min_eigenvalue(metric);
    if !(lam_min > 0.0) {
        return Err(Error::Infeasible(format!("certificate metric is not positive definite (min eigenvalue {lam_min:e})")));
    }

    let mean_sq = |vs: &[DVector<f64>]| vs.iter().zip(&w).map(|(v, wi)| wi * v.norm_squared()).sum::<f64>() / total;
    let se = mean_sq(features).sqrt();
    let sy = mean_sq(targets).sqrt();
    let cross: f64 = features.iter().zip(targets).zip(&w).map(|((e, y), wi)| wi * e.dot(y)).sum();
    let r_ls = if se > 0.0 { (-cross / (total * se * se)).max(0.0) } else { 0.0 };
    // Isotropic contraction -r0 I: the ridge target, and the answer when the
    // features carry no information.
    let mut r0 = r_ls.max(margin / lam_min);
    if let Some(h) = config.euler_step {
        if !(h > 0.0) {
            return Err(Error::InvalidInput("Euler step must be positive".into()));
        }
        // -r0 I must stay strictly inside the discrete constraint.
        if margin / lam_min > 0.25 / h {
            return Err(Error::Infeasible(format!("no contraction certifies Euler steps of {h} s at margin {margin:e}")));
        }
        r0 = r0.min(0.5 / h);
    }
    if se == 0.0 {
        let a0 = DMatrix::identity(d, d) * -r0;
        let mut systems = LinearSystems::new(vec![a0; k], metric.clone(), margin)?;
        systems.fit = Some(FitReport { mse: mean_sq(targets), iterations: 0, converged: true });
        return Ok(systems);
    }
    let sy = if sy > 0.0 { sy } else { se };
    let m_norm = spectral_norm(metric);
    let m_hat = metric / m_norm;
    // Margins are tightened slightly so rounding cannot break the certificate
    // after rescaling.
    let tighten = 1.0 + 1e-9;
    let lmis = constraint_blocks(&m_hat, margin / m_norm * tighten, se / sy, config.euler_step);

    let kd = k * d;
    let mut g = DMatrix::<f64>::zeros(kd, kd);
    let mut cross_yz = DMatrix::<f64>::zeros(d, kd);
    let mut z = DVector::<f64>::zeros(kd);
    for i in 0..n {
        let e = &features[i] / se;
        let y = &targets[i] / sy;
        for (col, gk) in gammas[i].iter().enumerate() {
            z.rows_mut(col * d, d).copy_from(&(&e * *gk));
        }
        let wi = w[i] / total;
        g.ger(wi, &z, &z, 1.0);
        cross_yz.ger(wi, &y, &z, 1.0);
    }
    let lambda = {
        let t = g.trace() / kd as f64;
        if t > 0.0 { config.ridge * t } else { 1.0 }
    };
    let a0_hat = DMatrix::identity(d, d) * (-r0 * se / sy);
    let mut theta = DMatrix::zeros(d, kd);
    for col in 0..k {
        theta.columns_mut(col * d, d).copy_from(&a0_hat);
    }
    // Objective ½ tr(Θ H Θᵀ) - ⟨F, Θ⟩, i.e. the weighted residual plus ridge
    // up to a constant. The ridge target is strictly feasible.
    let h = (&g + DMatrix::identity(kd, kd) * lambda) * 2.0;
    let f_lin = (&cross_yz + &theta * lambda) * 2.0;
    let objective = |th: &DMatrix<f64>| 0.5 * (th * &h).dot(th) - f_lin.dot(th);

    let nv = d * kd;
    let dd = d * d;
    let barrier = |th: &DMatrix<f64>| -> Option<f64> {
        let mut total = 0.0;
        for col in 0..k {
            let block = &th.as_slice()[col * dd..(col + 1) * dd];
            for lmi in &lmis {
                let chol = lmi.slack(block).cholesky()?;
                total -= 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            }
        }
        Some(total)
    };

    let m_barrier = (k * lmis.iter().map(|l| l.offset.nrows()).sum::<usize>()) as f64;
    let mut t = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    'outer: loop {
        loop {
            if iterations >= config.max_iter {
                break 'outer;
            }
            iterations += 1;
            let mut grad = DVector::from_column_slice((&theta * &h - &f_lin).as_slice()) * t;
            let mut hess = DMatrix::<f64>::zeros(nv, nv);
            for a in 0..kd {
                for b in 0..kd {
                    let v = t * h[(a, b)];
                    if v != 0.0 {
                        for i in 0..d {
                            hess[(a * d + i, b * d + i)] = v;
                        }
                    }
                }
            }
            for col in 0..k {
                let off = col * dd;
                let block = &theta.as_slice()[off..off + dd];
                for lmi in &lmis {
                    let s_inv = lmi
                        .slack(block)
                        .try_inverse()
                        .ok_or_else(|| Error::Numerical("barrier slack became singular".into()))?;
                    let left: Vec<DMatrix<f64>> = lmi.units.iter().map(|u| &s_inv * u).collect();
                    let right: Vec<DMatrix<f64>> = left.iter().map(|l| l.transpose()).collect();
                    for p in 0..dd {
                        grad[off + p] -= left[p].trace();
                        for q in p..dd {
                            // tr(S⁻¹U_p S⁻¹U_q)
                            let v = left[p].dot(&right[q]);
                            hess[(off + p, off + q)] += v;
                            if q != p {
                                hess[(off + q, off + p)] += v;
                            }
                        }
                    }
                }
            }
            let hess = symmetrize(&hess);
            let scale = hess.diagonal().amax();
            // The Hessian is positive definite; late on the path rounding can
            // hide that, so retry with growing diagonal jitter. Past that the
            // iterate is as good as this precision allows, and it is feasible.
            let Some(chol) = [0.0, 1e-14, 1e-12, 1e-10, 1e-8]
                .iter()
                .find_map(|j| (&hess + DMatrix::identity(nv, nv) * (j * scale)).cholesky())
            else {
                break 'outer;
            };
            let step = -chol.solve(&grad);
            let decrement = -grad.dot(&step);
            if !decrement.is_finite() {
                return Err(Error::OptimizationFailed { iterations, detail: "non-finite Newton step in system fit".into() });
            }
            // Centering error in objective units is decrement / t.
            if decrement <= 1e-8 {
                break;
            }
            let step = DMatrix::from_column_slice(d, kd, step.as_slice());
            let current = t * objective(&theta) + barrier(&theta).unwrap_or(f64::INFINITY);
            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha >= 1e-12 {
                let trial = &theta + &step * alpha;
                if let Some(b) = barrier(&trial) {
                    let value = t * objective(&trial) + b;
                    if value <= current - 0.25 * alpha * decrement {
                        accepted = Some((trial, value));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            match accepted {
                Some((trial, value)) => {
                    theta = trial;
                    // Progress below rounding of the barrier value: centered.
                    if current - value <= 1e-13 * current.abs() {
                        break;
                    }
                }
                None => break,
            }
        }
        if m_barrier / t <= config.tol {
            converged = true;
            break;
        }
        t *= 50.0;
    }

    let matrices: Vec<DMatrix<f64>> = (0..k).map(|col| theta.columns(col * d, d) * (sy / se)).collect();
    let mut systems = LinearSystems::new(matrices, metric.clone(), margin)?;
    let mse = features
        .iter()
        .zip(targets)
        .zip(gammas)
        .zip(&w)
        .map(|(((e, y), gm), wi)| wi * (y - systems.apply(gm, e)).norm_squared())
        .sum::<f64>()
        / total;
    systems.fit = Some(FitReport { mse, iterations, converged });
    Ok(systems)
}

/// Affine matrix inequality `offset + Σ_p θ_p units[p] ≻ 0` over the
/// column-major entries `θ` of one normalized system matrix.
struct Lmi {
    offset: DMatrix<f64>,
    units: Vec<DMatrix<f64>>,
}

impl Lmi {
    fn slack(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut s = self.offset.clone();
        for (u, v) in self.units.iter().zip(theta) {
            if *v != 0.0 {
                s.zip_apply(u, |a, b| *a += *v * b);
            }
        }
        s
    }
}

/// Constraints on one normalized matrix `Θ = A·se/sy` with normalized metric
/// `M̂ = M/‖M‖` and margin `δ̂ = δ/‖M‖`:
///
/// * `-(M̂Θ + ΘᵀM̂)/2 - (δ̂·se/sy)/2 · I ≻ 0`, the continuous certificate;
/// * with an Euler step `h` and `τ = h·sy/se`, the Schur form of
///   `(I + τΘ)ᵀ M̂ (I + τΘ) ⪯ M̂ - hδ̂ I`, which makes `V` decrease along every
///   Euler step of length at most `h` for any mixture of the matrices.
fn constraint_blocks(m_hat: &DMatrix<f64>, margin_hat: f64, ratio: f64, euler_step: Option<f64>) -> Vec<Lmi> {
    let d = m_hat.nrows();
    let unit = |p: usize| {
        let mut e = DMatrix::zeros(d, d);
        e[(p % d, p / d)] = 1.0;
        e
    };
    let mut out = vec![Lmi {
        offset: DMatrix::identity(d, d) * (-0.5 * margin_hat * ratio),
        units: (0..d * d).map(|p| -symmetrize(&(m_hat * unit(p)))).collect(),
    }];
    if let Some(h) = euler_step {
        let tau = h / ratio;
        let mut offset = DMatrix::zeros(2 * d, 2 * d);
        offset.view_mut((0, 0), (d, d)).copy_from(&(m_hat - DMatrix::identity(d, d) * (h * margin_hat)));
        offset.view_mut((0, d), (d, d)).copy_from(m_hat);
        offset.view_mut((d, 0), (d, d)).copy_from(m_hat);
        offset.view_mut((d, d), (d, d)).copy_from(m_hat);
        let units = (0..d * d)
            .map(|p| {
                let lower = m_hat * unit(p) * tau;
                let mut u = DMatrix::zeros(2 * d, 2 * d);
                u.view_mut((d, 0), (d, d)).copy_from(&lower);
                u.view_mut((0, d), (d, d)).copy_from(&lower.transpose());
                u
            })
            .collect();
        out.push(Lmi { offset, units });
    }
    out
}

/// Position part of a policy: `ẋ = Σ γ_k(x) A_k (x − x*)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionField {
    gmm: GmmModel,
    systems: LinearSystems,
    lyapunov: LyapunovP,
    radius: f64,
}

impl PositionField {
    /// `radius` is the training-data extent around the attractor, used for
    /// divergence detection.
    pub fn new(gmm: GmmModel, systems: LinearSystems, lyapunov: LyapunovP, radius: f64) -> Result<Self> {
        let d = lyapunov.dim();
        if gmm.dim() != d || systems.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: gmm.dim().min(systems.dim()) });
        }
        if gmm.len() != systems.len() {
            return Err(Error::InvalidInput(format!("{} components but {} linear systems", gmm.len(), systems.len())));
        }
        if (systems.metric() - lyapunov.matrix()).amax() > 1e-12 * spectral_norm(lyapunov.matrix()).max(1e-300) {
            return Err(Error::InvalidInput("linear systems are certified against a different P".into()));
        }
        Ok(Self { gmm, systems, lyapunov, radius })
    }

    pub fn dim(&self) -> usize {
        self.lyapunov.dim()
    }

    pub fn gmm(&self) -> &GmmModel {
        &self.gmm
    }

    pub fn systems(&self) -> &LinearSystems {
        &self.systems
    }

    pub fn lyapunov(&self) -> &LyapunovP {
        &self.lyapunov
    }

    pub fn attractor(&self) -> &DVector<f64> {
        self.lyapunov.attractor()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn velocity(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut gamma = vec![0.0; self.gmm.len()];
        self.gmm.mixing_weights_into(x.as_slice(), &mut gamma);
        self.systems.apply(&gamma, &(x - self.attractor()))
    }
}

/// Orientation part of a policy. Matrices act on reduced coordinates in the
/// tangent basis of the attractor.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientationField {
    gmm: TangentGmm,
    systems: LinearSystems,
}

impl OrientationField {
    pub fn new(gmm: TangentGmm, systems: LinearSystems) -> Result<Self> {
        if systems.dim() != 3 {
            return Err(Error::DimensionMismatch { expected: 3, got: systems.dim() });
        }
        if gmm.len() != systems.len() {
            return Err(Error::InvalidInput(format!("{} components but {} linear systems", gmm.len(), systems.len())));
        }
        Ok(Self { gmm, systems })
    }

    pub fn gmm(&self) -> &TangentGmm {
        &self.gmm
    }

    pub fn systems(&self) -> &LinearSystems {
        &self.systems
    }

    pub fn attractor(&self) -> UnitQuaternion {
        self.gmm.attractor()
    }

    /// Desired displacement over one step of length `dt`, tangent at the
    /// attractor (ambient coordinates).
    pub fn displacement(&self, q: &UnitQuaternion, dt: f64) -> Result<Vector4<f64>> {
        let att = self.attractor();
        let c = q.dot(&att);
        if c <= 0.0 {
            return Err(Error::ProjectionDomain { angle: c.clamp(-1.0, 1.0).acos() });
        }
        let basis = self.gmm.basis();
        let r = basis.reduce(&quat_log(&att, q).coords);
        let r = DVector::from_column_slice(r.as_slice());
        let gamma = self.gmm.reduced().mixing_weights(&r);
        let step = self.systems.apply(gamma.as_slice(), &r) * dt;
        Ok(basis.lift(&Vector3::from_column_slice(step.as_slice())))
    }

    /// Next desired orientation after one step of length `dt`.
    pub fn desired(&self, q: &UnitQuaternion, dt: f64) -> Result<UnitQuaternion> {
        let step = self.displacement(q, dt)?;
        if step == Vector4::zeros() {
            return Ok(*q);
        }
        let body = parallel_transport(&self.attractor(), q, &step)?;
        quat_exp(q, &body.coords)
    }

    /// `ω = vec(q̄ ∘ q_des) / dt`, the vector part of the body-frame
    /// quaternion difference (half-angle scale, matching the update
    /// `q ← q ∘ (√(1 − ‖ω dt‖²), ω dt)` used by [`rollout`]).
    pub fn angular_velocity(&self, q: &UnitQuaternion, dt: f64) -> Result<Vector3<f64>> {
        if !(dt > 0.0) {
            return Err(Error::InvalidInput("dt must be positive".into()));
        }
        let target = self.desired(q, dt)?;
        if target == *q {
            return Ok(Vector3::zeros());
        }
        Ok(q.conjugate().compose(&target).vector_part() / dt)
    }
}

/// `ẋ = Σ γ_k(x) A_k (x − x*)`.
pub fn eval_velocity(policy: &Se3Policy, x: &DVector<f64>) -> DVector<f64> {
    policy.position().velocity(x)
}

/// Body angular velocity at `q` for the policy's step `dt`.
pub fn eval_angular_velocity(policy: &Se3Policy, q: &UnitQuaternion) -> Result<Vector3<f64>> {
    match policy.orientation() {
        Some(field) => field.angular_velocity(q, policy.dt()),
        None => Err(Error::InvalidInput("policy has no orientation field".into())),
    }
}

/// Applies the body angular velocity `ω` over `dt` with the half-angle
/// convention of [`OrientationField::angular_velocity`].
pub fn integrate_orientation(q: &UnitQuaternion, omega: &Vector3<f64>, dt: f64) -> Result<UnitQuaternion> {
    let v = omega * dt;
    let s = v.norm_squared();
    if s == 0.0 {
        return Ok(*q);
    }
    if s > 1.0 {
        return Err(Error::Numerical(format!("orientation step of {} exceeds a quarter turn", s.sqrt())));
    }
    let dq = UnitQuaternion::new((1.0 - s).sqrt(), v.x, v.y, v.z)?;
    Ok(q.compose(&dq))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub max_steps: usize,
    pub position_tolerance: f64,
    /// Geodesic distance on S^3 (`‖log_att q‖`).
    pub orientation_tolerance: f64,
    /// Divergence when `‖x − x*‖` exceeds this times the policy data radius.
    pub divergence_factor: f64,
    /// Step length; the policy's `dt` when absent.
    pub dt: Option<f64>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { max_steps: 5000, position_tolerance: 1e-3, orientation_tolerance: 1e-2, divergence_factor: 1e3, dt: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxSteps,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub trajectory: PoseTrajectory,
    pub termination: Termination,
    /// Number of policy evaluations, including the final one at which the
    /// tolerance was met.
    pub steps: usize,
}

pub fn rollout(policy: &Se3Policy, start: &Pose, max_steps: usize) -> Result<Rollout> {
    rollout_with(policy, start, &RolloutConfig { max_steps, ..RolloutConfig::default() }, |_, v| Ok(v))
}

/// Euler rollout; `filter(x, ẋ)` may reshape the position velocity before it
/// is applied (obstacle modulation).
pub fn rollout_with<F>(policy: &Se3Policy, start: &Pose, config: &RolloutConfig, mut filter: F) -> Result<Rollout>
where
    F: FnMut(&DVector<f64>, DVector<f64>) -> Result<DVector<f64>>,
{
    let dt = config.dt.unwrap_or(policy.dt());
    if !(dt > 0.0) {
        return Err(Error::InvalidInput("dt must be positive".into()));
    }
    let field = policy.position();
    if start.position.len() != field.dim() {
        return Err(Error::DimensionMismatch { expected: field.dim(), got: start.position.len() });
    }
    let orientation = policy.orientation();
    let x_star = field.attractor();
    let limit = config.divergence_factor * field.radius().max(f64::MIN_POSITIVE);

    let mut x = start.position.clone();
    let mut q = start.orientation;
    let mut traj = PoseTrajectory::default();
    let mut steps = 0;
    loop {
        steps += 1;
        let err = (&x - x_star).norm();
        if !err.is_finite() || err > limit {
            return Err(Error::Divergence { step: steps, distance: err });
        }
        let ori_err = match orientation {
            Some(o) => quat_log(&o.attractor(), &q).norm(),
            None => 0.0,
        };
        let converged = err < config.position_tolerance && ori_err < config.orientation_tolerance;
        let v = if converged { DVector::zeros(x.len()) } else { filter(&x, field.velocity(&x))? };
        traj.times.push((steps - 1) as f64 * dt);
        traj.positions.push(x.clone());
        traj.velocities.push(v.clone());
        if orientation.is_some() {
            traj.orientations.push(q);
        }
        if converged {
            return Ok(Rollout { trajectory: traj, termination: Termination::Converged, steps });
        }
        if steps >= config.max_steps {
            return Ok(Rollout { trajectory: traj, termination: Termination::MaxSteps, steps });
        }
        if let Some(o) = orientation {
            q = o.desired(&q, dt)?;
        }
        x.axpy(dt, &v, 1.0);
    }
}

//! Quadratic Lyapunov functions `V(x) = (x - x*)ᵀ P (x - x*)` and convex
//! learning of `P` from demonstrations.
//!
//! Learning minimizes `Σ w_i max(0, ẋ_iᵀ P (x_i - x*))` over
//! `ε I ⪯ P ⪯ κ ε I`. The objective is positively homogeneous in `P`, so the
//! upper bound only fixes the admissible condition number and keeps the
//! feasible set compact.
//!
//! Two independent solvers are provided. [`PqlfSolver::InteriorPoint`] is a
//! primal-dual interior point method on the slack reformulation, treating the
//! eigenvalue bounds as two small semidefinite blocks. [`PqlfSolver::CuttingPlane`] uses only subgradients: a
//! deep-cut ellipsoid method whose infeasible centers are projected onto the
//! constraint set by eigenvalue clipping. Both stop on a certified optimality
//! gap.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::linalg::{min_eigenvalue, symmetrize};
use crate::mixture::GmmModel;
use crate::{Error, Result};

/// Lower eigenvalue bound in units where the data radius is 1.
pub const DEFAULT_EPSILON: f64 = 1e-2;
/// Largest admissible `λ_max(P) / ε`.
pub const CONDITION_CAP: f64 = 1e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovP {
    p: DMatrix<f64>,
    attractor: DVector<f64>,
    epsilon: f64,
}

impl LyapunovP {
    /// Checks symmetry (1e-10) and `λ_min(P) ≥ ε - 1e-8`.
    pub fn new(p: DMatrix<f64>, attractor: DVector<f64>, epsilon: f64) -> Result<Self> {
        let d = attractor.len();
        if p.nrows() != d || p.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: p.nrows() });
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidInput("epsilon must be positive".into()));
        }
        if (&p - p.transpose()).amax() > 1e-10 {
            return Err(Error::InvalidInput("P is not symmetric".into()));
        }
        let p = symmetrize(&p);
        let lo = min_eigenvalue(&p);
        if lo < epsilon - 1e-8 {
            return Err(Error::Infeasible(format!("min eigenvalue {lo:e} below epsilon {epsilon:e}")));
        }
        Ok(Self { p, attractor, epsilon })
    }

    /// `P = I`, mostly for tests and orientation-style identity metrics.
    pub fn identity(attractor: DVector<f64>) -> Self {
        let d = attractor.len();
        Self { p: DMatrix::identity(d, d), attractor, epsilon: 1.0 }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn attractor(&self) -> &DVector<f64> {
        &self.attractor
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.attractor.len()
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        lyapunov_value(self, x)
    }

    pub fn rate(&self, x: &DVector<f64>, xdot: &DVector<f64>) -> f64 {
        lyapunov_rate(self, x, xdot)
    }

    /// Same certificate about a different attractor.
    pub fn with_attractor(&self, attractor: DVector<f64>) -> Self {
        Self { p: self.p.clone(), attractor, epsilon: self.epsilon }
    }
}

pub fn lyapunov_value(l: &LyapunovP, x: &DVector<f64>) -> f64 {
    let e = x - &l.attractor;
    e.dot(&(&l.p * &e)).max(0.0)
}

/// `V̇ = 2 ẋᵀ P (x - x*)`
pub fn lyapunov_rate(l: &LyapunovP, x: &DVector<f64>, xdot: &DVector<f64>) -> f64 {
    let e = x - &l.attractor;
    2.0 * xdot.dot(&(&l.p * e))
}

/// Share of samples with `V̇ ≥ 0`.
pub fn violation_fraction(l: &LyapunovP, positions: &[DVector<f64>], velocities: &[DVector<f64>]) -> f64 {
    if positions.is_empty() {
        return 0.0;
    }
    let violations = positions.iter().zip(velocities).filter(|(x, v)| lyapunov_rate(l, x, v) >= 0.0).count();
    violations as f64 / positions.len() as f64
}

/// Per-component averages of position and velocity with sample counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSummary {
    pub positions: Vec<DVector<f64>>,
    pub velocities: Vec<DVector<f64>>,
    pub counts: Vec<usize>,
}

impl GmmSummary {
    /// Averages samples by hard label. Empty labels are dropped.
    pub fn from_labels(positions: &[DVector<f64>], velocities: &[DVector<f64>], labels: &[usize]) -> Result<Self> {
        if positions.is_empty() || positions.len() != velocities.len() || labels.len() != positions.len() {
            return Err(Error::InsufficientData("summary needs aligned, nonempty samples and labels".into()));
        }
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let d = positions[0].len();
        let mut sum_x = vec![DVector::zeros(d); k];
        let mut sum_v = vec![DVector::zeros(d); k];
        let mut counts = vec![0usize; k];
        for ((x, v), l) in positions.iter().zip(velocities).zip(labels) {
            sum_x[*l] += x;
            sum_v[*l] += v;
            counts[*l] += 1;
        }
        let mut out = GmmSummary { positions: vec![], velocities: vec![], counts: vec![] };
        for c in 0..k {
            if counts[c] > 0 {
                out.positions.push(&sum_x[c] / counts[c] as f64);
                out.velocities.push(&sum_v[c] / counts[c] as f64);
                out.counts.push(counts[c]);
            }
        }
        Ok(out)
    }

    /// Labels every sample by its most responsible component of `gmm`.
    pub fn from_model(gmm: &GmmModel, positions: &[DVector<f64>], velocities: &[DVector<f64>]) -> Result<Self> {
        let labels: Vec<usize> = positions.iter().map(|x| gmm.assign(x)).collect();
        Self::from_labels(positions, velocities, &labels)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.counts.iter().map(|c| *c as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PqlfSolver {
    #[default]
    InteriorPoint,
    CuttingPlane,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqlfConfig {
    pub solver: PqlfSolver,
    pub condition_cap: f64,
    /// Stop once the certified gap is below `rel_tol * objective + abs_tol * Σw`
    /// (normalized units).
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iter: usize,
}

impl Default for PqlfConfig {
    fn default() -> Self {
        Self { solver: PqlfSolver::InteriorPoint, condition_cap: CONDITION_CAP, rel_tol: 1e-7, abs_tol: 1e-10, max_iter: 20_000 }
    }
}

impl PqlfConfig {
    pub fn with_solver(solver: PqlfSolver) -> Self {
        Self { solver, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct PqlfSolution {
    pub lyapunov: LyapunovP,
    /// Objective at the returned `P`, original units.
    pub objective: f64,
    /// Newton steps or cutting-plane iterations.
    pub iterations: usize,
}

/// `ε` for data whose RMS distance to the attractor is `r`: `DEFAULT_EPSILON / r²`.
pub fn default_epsilon(positions: &[DVector<f64>], x_star: &DVector<f64>) -> f64 {
    let r = rms_radius(positions, x_star, None);
    if r > 0.0 {
        DEFAULT_EPSILON / (r * r)
    } else {
        DEFAULT_EPSILON
    }
}

/// `Σ w_i max(0, ẋ_iᵀ P (x_i - x*))`, unit weights when `weights` is `None`.
pub fn pqlf_objective(
    p: &DMatrix<f64>,
    x_star: &DVector<f64>,
    positions: &[DVector<f64>],
    velocities: &[DVector<f64>],
    weights: Option<&[f64]>,
) -> f64 {
    positions
        .iter()
        .zip(velocities)
        .enumerate()
        .map(|(i, (x, v))| {
            let w = weights.map_or(1.0, |w| w[i]);
            w * v.dot(&(p * (x - x_star))).max(0.0)
        })
        .sum()
}

pub fn learn_p_convex(positions: &[DVector<f64>], velocities: &[DVector<f64>], x_star: &DVector<f64>, epsilon: f64) -> Result<LyapunovP> {
    Ok(solve_pqlf(positions, velocities, None, x_star, epsilon, &PqlfConfig::default())?.lyapunov)
}

/// The per-point problem on component averages, each weighted by its count.
pub fn learn_p_gmm(summary: &GmmSummary, x_star: &DVector<f64>, epsilon: f64) -> Result<LyapunovP> {
    learn_p_gmm_with(summary, x_star, epsilon, &PqlfConfig::default())
}

pub fn learn_p_gmm_with(summary: &GmmSummary, x_star: &DVector<f64>, epsilon: f64, config: &PqlfConfig) -> Result<LyapunovP> {
    if summary.is_empty() {
        return Err(Error::InsufficientData("summary has no components".into()));
    }
    let w = summary.weights();
    Ok(solve_pqlf(&summary.positions, &summary.velocities, Some(&w), x_star, epsilon, config)?.lyapunov)
}

pub fn solve_pqlf(
    positions: &[DVector<f64>],
    velocities: &[DVector<f64>],
    weights: Option<&[f64]>,
    x_star: &DVector<f64>,
    epsilon: f64,
    config: &PqlfConfig,
) -> Result<PqlfSolution> {
    let n = positions.len();
    if n == 0 || velocities.len() != n || weights.is_some_and(|w| w.len() != n) {
        return Err(Error::InsufficientData("need aligned, nonempty positions and velocities".into()));
    }
    let d = x_star.len();
    if positions.iter().chain(velocities).any(|v| v.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: positions[0].len() });
    }
    if !(epsilon > 0.0) || !(config.condition_cap > 1.0) {
        return Err(Error::InvalidInput("need epsilon > 0 and condition cap > 1".into()));
    }
    let r = rms_radius(positions, x_star, weights);
    let s = (velocities.iter().map(|v| v.norm_squared()).sum::<f64>() / n as f64).sqrt();
    let floor = DMatrix::identity(d, d) * epsilon;
    if !(r > 0.0) || !(s > 0.0) {
        let lyapunov = LyapunovP::new(floor.clone(), x_star.clone(), epsilon)?;
        return Ok(PqlfSolution { lyapunov, objective: 0.0, iterations: 0 });
    }

    let problem = Problem::new(positions, velocities, weights, x_star, r, s, epsilon * r * r, config.condition_cap);
    let (p_norm, iterations) = match config.solver {
        PqlfSolver::InteriorPoint => problem.interior_point(config)?,
        PqlfSolver::CuttingPlane => problem.cutting_plane(config)?,
    };
    let mut p = problem.smat(&p_norm) / (r * r);
    let mut objective = pqlf_objective(&p, x_star, positions, velocities, weights);
    let floor_objective = pqlf_objective(&floor, x_star, positions, velocities, weights);
    if objective > floor_objective {
        // Both are feasible; the solver stopped inside its gap of an optimum
        // attained at the floor.
        let slack = (config.rel_tol * floor_objective + config.abs_tol * problem.total_weight) * (s / r) * 10.0;
        if objective > floor_objective + slack {
            return Err(Error::OptimizationFailed {
                iterations,
                detail: format!("objective {objective:e} worse than the trivial point {floor_objective:e}"),
            });
        }
        p = floor;
        objective = floor_objective;
    }
    let lyapunov = LyapunovP::new(symmetrize(&p), x_star.clone(), epsilon)?;
    Ok(PqlfSolution { lyapunov, objective, iterations })
}

fn rms_radius(positions: &[DVector<f64>], x_star: &DVector<f64>, weights: Option<&[f64]>) -> f64 {
    let (mut acc, mut total) = (0.0, 0.0);
    for (i, x) in positions.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        acc += w * (x - x_star).norm_squared();
        total += w;
    }
    if total > 0.0 {
        (acc / total).sqrt()
    } else {
        0.0
    }
}

/// Normalized problem in orthonormal coordinates of symmetric matrices
/// (off-diagonal entries scaled by √2), so `a_i = g_iᵀ p`.
struct Problem {
    d: usize,
    nv: usize,
    g: Vec<f64>,
    w: Vec<f64>,
    eps: f64,
    cap: f64,
    total_weight: f64,
}

impl Problem {
    #[allow(clippy::too_many_arguments)]
    fn new(
        positions: &[DVector<f64>],
        velocities: &[DVector<f64>],
        weights: Option<&[f64]>,
        x_star: &DVector<f64>,
        r: f64,
        s: f64,
        eps: f64,
        cap: f64,
    ) -> Self {
        let d = x_star.len();
        let nv = d * (d + 1) / 2;
        let mut g = Vec::with_capacity(positions.len() * nv);
        let mut w = Vec::with_capacity(positions.len());
        for (i, (x, v)) in positions.iter().zip(velocities).enumerate() {
            let wi = weights.map_or(1.0, |w| w[i]);
            if wi <= 0.0 {
                continue;
            }
            let xh = (x - x_star) / r;
            let vh = v / s;
            for a in 0..d {
                for b in a..d {
                    g.push(if a == b { vh[a] * xh[a] } else { (vh[a] * xh[b] + vh[b] * xh[a]) / std::f64::consts::SQRT_2 });
                }
            }
            w.push(wi);
        }
        let total_weight = w.iter().sum();
        Self { d, nv, g, w, eps, cap, total_weight }
    }

    fn len(&self) -> usize {
        self.w.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.g[i * self.nv..(i + 1) * self.nv]
    }

    fn smat(&self, p: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.d, self.d);
        let mut k = 0;
        for a in 0..self.d {
            for b in a..self.d {
                if a == b {
                    m[(a, a)] = p[k];
                } else {
                    let v = p[k] / std::f64::consts::SQRT_2;
                    m[(a, b)] = v;
                    m[(b, a)] = v;
                }
                k += 1;
            }
        }
        m
    }

    fn svec(&self, m: &DMatrix<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.nv);
        for a in 0..self.d {
            for b in a..self.d {
                out.push(if a == b { m[(a, a)] } else { (m[(a, b)] + m[(b, a)]) / std::f64::consts::SQRT_2 });
            }
        }
        out
    }

    fn scaled_identity(&self, c: f64) -> Vec<f64> {
        self.svec(&(DMatrix::identity(self.d, self.d) * c))
    }

    fn objective(&self, p: &[f64]) -> f64 {
        (0..self.len()).map(|i| self.w[i] * dot(self.row(i), p).max(0.0)).sum()
    }

    /// Infeasible primal-dual path following (Mehrotra predictor-corrector)
    /// on `min wᵀs` s.t. `s ≥ 0`, `u = s - Gp ≥ 0`, `X = P - εI ⪰ 0`,
    /// `Y = κεI - P ⪰ 0`, with HKM directions on the matrix blocks. Every
    /// Newton system reduces to an `nv x nv` Schur complement.
    fn interior_point(&self, config: &PqlfConfig) -> Result<(Vec<f64>, usize)> {
        let (n, nv, d) = (self.len(), self.nv, self.d);
        let id = DMatrix::identity(d, d);
        let (lo, hi) = (self.eps, self.eps * self.cap);
        let mut p = self.scaled_identity(0.5 * (lo + hi));
        let a0: Vec<f64> = (0..n).map(|i| dot(self.row(i), &p)).collect();
        let shift = 1.0 + a0.iter().map(|a| a.abs()).sum::<f64>() / n.max(1) as f64;
        let mut s: Vec<f64> = a0.iter().map(|a| a.max(0.0) + shift).collect();
        let mut y: Vec<f64> = self.w.iter().map(|w| 0.5 * w).collect();
        let mut z = y.clone();
        let zeta = 1.0 + self.gt(&z).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut sm = &id * zeta;
        let mut tm = &id * zeta;
        let m_total = (2 * n + 2 * d) as f64;
        let w_max = self.w.iter().fold(0.0_f64, |m, v| m.max(*v));
        let iter_limit = config.max_iter.min(500);
        for iter in 0..iter_limit {
            let pm = self.smat(&p);
            let xm = &pm - &id * lo;
            let ym = &id * hi - &pm;
            let a: Vec<f64> = (0..n).map(|i| dot(self.row(i), &p)).collect();
            let u: Vec<f64> = (0..n).map(|i| s[i] - a[i]).collect();
            let r_s: Vec<f64> = (0..n).map(|i| self.w[i] - y[i] - z[i]).collect();
            let gz = self.gt(&z);
            let (svs, svt) = (self.svec(&sm), self.svec(&tm));
            let r_p: Vec<f64> = (0..nv).map(|k| gz[k] - svs[k] + svt[k]).collect();
            let gap = dot(&y, &s) + dot(&z, &u) + (&xm * &sm).trace() + (&ym * &tm).trace();
            let obj = self.objective(&p);
            let dual_scale = 1.0 + gz.iter().chain(&svs).chain(&svt).fold(0.0_f64, |m, v| m.max(v.abs()));
            let feasible = r_s.iter().all(|v| v.abs() <= 1e-10 * w_max) && r_p.iter().all(|v| v.abs() <= 1e-10 * dual_scale);
            if feasible && gap <= config.rel_tol * obj + config.abs_tol * self.total_weight {
                return Ok((p, iter));
            }
            let mu = gap / m_total;
            let chol_x = xm.clone().cholesky();
            let chol_y = ym.clone().cholesky();
            let (Some(chol_x), Some(chol_y)) = (chol_x, chol_y) else {
                return Err(Error::OptimizationFailed { iterations: iter, detail: "primal iterate left the cone".into() });
            };
            let x_inv = chol_x.inverse();
            let y_inv = chol_y.inverse();

            // Schur complement, shared by predictor and corrector.
            let ratio_y: Vec<f64> = (0..n).map(|i| y[i] / s[i]).collect();
            let ratio_z: Vec<f64> = (0..n).map(|i| z[i] / u[i]).collect();
            let diag: Vec<f64> = (0..n).map(|i| ratio_y[i] + ratio_z[i]).collect();
            let mut schur = DMatrix::zeros(nv, nv);
            for i in 0..n {
                let g = self.row(i);
                let gamma = ratio_z[i] * ratio_y[i] / diag[i];
                for r in 0..nv {
                    let gr = gamma * g[r];
                    for c in 0..=r {
                        schur[(r, c)] += gr * g[c];
                    }
                }
            }
            for r in 0..nv {
                for c in 0..r {
                    schur[(c, r)] = schur[(r, c)];
                }
            }
            for b in 0..nv {
                let mut e = vec![0.0; nv];
                e[b] = 1.0;
                let eb = self.smat(&e);
                let hx = self.svec(&symmetrize(&(&x_inv * &eb * &sm)));
                let hy = self.svec(&symmetrize(&(&y_inv * &eb * &tm)));
                for r in 0..nv {
                    schur[(r, b)] += hx[r] + hy[r];
                }
            }
            let Some(schur_chol) = regularized_cholesky(symmetrize(&schur)) else {
                return Err(Error::OptimizationFailed { iterations: iter, detail: "Schur complement is singular".into() });
            };

            let direction = |c_y: &[f64], c_z: &[f64], k_s: &DMatrix<f64>, k_t: &DMatrix<f64>| -> Direction {
                let mut alpha_i = vec![0.0; n];
                let mut delta_i = vec![0.0; n];
                let mut rhs = DVector::from_iterator(nv, r_p.iter().map(|v| -v));
                let (sks, skt) = (self.svec(k_s), self.svec(k_t));
                for k in 0..nv {
                    rhs[k] += sks[k] - skt[k];
                }
                for i in 0..n {
                    alpha_i[i] = (c_y[i] / s[i] + c_z[i] / u[i] - r_s[i]) / diag[i];
                    delta_i[i] = (c_z[i] - z[i] * alpha_i[i]) / u[i];
                    let g = self.row(i);
                    for k in 0..nv {
                        rhs[k] -= g[k] * delta_i[i];
                    }
                }
                let dp = schur_chol.solve(&rhs);
                let dxm = self.smat(dp.as_slice());
                let mut dir = Direction {
                    ds: vec![0.0; n],
                    du: vec![0.0; n],
                    dy: vec![0.0; n],
                    dz: vec![0.0; n],
                    dsm: symmetrize(&(k_s - &x_inv * &dxm * &sm)),
                    dtm: symmetrize(&(k_t + &y_inv * &dxm * &tm)),
                    dxm,
                    dp: dp.as_slice().to_vec(),
                };
                for i in 0..n {
                    let da = dot(self.row(i), dp.as_slice());
                    let beta = ratio_z[i] / diag[i];
                    dir.ds[i] = alpha_i[i] + beta * da;
                    dir.du[i] = dir.ds[i] - da;
                    dir.dz[i] = delta_i[i] + ratio_z[i] * (1.0 - beta) * da;
                    dir.dy[i] = (c_y[i] - y[i] * dir.ds[i]) / s[i];
                }
                dir
            };
            let step_lengths = |dir: &Direction| -> (f64, f64) {
                let mut ap = max_step_vec(&s, &dir.ds).min(max_step_vec(&u, &dir.du));
                ap = ap.min(max_step_psd(&xm, &dir.dxm)).min(max_step_psd(&ym, &(-&dir.dxm)));
                let mut ad = max_step_vec(&y, &dir.dy).min(max_step_vec(&z, &dir.dz));
                ad = ad.min(max_step_psd(&sm, &dir.dsm)).min(max_step_psd(&tm, &dir.dtm));
                (ap.min(1.0), ad.min(1.0))
            };

            let neg_ys: Vec<f64> = (0..n).map(|i| -y[i] * s[i]).collect();
            let neg_zu: Vec<f64> = (0..n).map(|i| -z[i] * u[i]).collect();
            let aff = direction(&neg_ys, &neg_zu, &(-&sm), &(-&tm));
            let (ap, ad) = step_lengths(&aff);
            let mut gap_aff = 0.0;
            for i in 0..n {
                gap_aff += (s[i] + ap * aff.ds[i]) * (y[i] + ad * aff.dy[i]);
                gap_aff += (u[i] + ap * aff.du[i]) * (z[i] + ad * aff.dz[i]);
            }
            gap_aff += ((&xm + &aff.dxm * ap) * (&sm + &aff.dsm * ad)).trace();
            gap_aff += ((&ym - &aff.dxm * ap) * (&tm + &aff.dtm * ad)).trace();
            let sigma = (gap_aff / gap).clamp(0.0, 1.0).powi(3);
            let target = sigma * mu;

            let c_y: Vec<f64> = (0..n).map(|i| target - y[i] * s[i] - aff.ds[i] * aff.dy[i]).collect();
            let c_z: Vec<f64> = (0..n).map(|i| target - z[i] * u[i] - aff.du[i] * aff.dz[i]).collect();
            let k_s = &x_inv * target - &sm - symmetrize(&(&x_inv * &aff.dxm * &aff.dsm));
            let k_t = &y_inv * target - &tm + symmetrize(&(&y_inv * &aff.dxm * &aff.dtm));
            let dir = direction(&c_y, &c_z, &k_s, &k_t);
            let (ap, ad) = step_lengths(&dir);
            let (ap, ad) = (0.99 * ap, 0.99 * ad);
            for k in 0..nv {
                p[k] += ap * dir.dp[k];
            }
            for i in 0..n {
                s[i] += ap * dir.ds[i];
                y[i] += ad * dir.dy[i];
                z[i] += ad * dir.dz[i];
            }
            sm = symmetrize(&(&sm + &dir.dsm * ad));
            tm = symmetrize(&(&tm + &dir.dtm * ad));
        }
        Err(Error::OptimizationFailed { iterations: iter_limit, detail: "interior point did not reach the gap tolerance".into() })
    }

    /// `Gᵀ z`
    fn gt(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nv];
        for (i, zi) in z.iter().enumerate() {
            for (o, g) in out.iter_mut().zip(self.row(i)) {
                *o += zi * g;
            }
        }
        out
    }

    fn cutting_plane(&self, config: &PqlfConfig) -> Result<(Vec<f64>, usize)> {
        let (n, d) = (self.nv, self.d);
        let lo = self.eps;
        let hi = self.eps * self.cap;
        let mut center = self.scaled_identity(0.5 * (lo + hi));
        let radius = (d as f64).sqrt() * 0.5 * (hi - lo) * (1.0 + 1e-9);
        let mut shape = DMatrix::identity(n, n) * (radius * radius);
        let mut best = self.scaled_identity(lo);
        let mut best_f = self.objective(&best);
        let mut lower_bound = 0.0_f64;
        let gap_ok = |best_f: f64, lb: f64| best_f - lb <= config.rel_tol * best_f + config.abs_tol * self.total_weight;
        for iter in 0..config.max_iter {
            if gap_ok(best_f, lower_bound) {
                return Ok((best, iter));
            }
            let pm = self.smat(&center);
            let eig = SymmetricEigen::new(pm.clone());
            let (imin, imax) = extreme_indices(eig.eigenvalues.as_slice());
            let (h, violation) = if eig.eigenvalues[imin] < lo {
                let v = eig.eigenvectors.column(imin).into_owned();
                (self.svec(&(-(&v * v.transpose()))), lo - eig.eigenvalues[imin])
            } else if eig.eigenvalues[imax] > hi {
                let v = eig.eigenvectors.column(imax).into_owned();
                (self.svec(&(&v * v.transpose())), eig.eigenvalues[imax] - hi)
            } else {
                (vec![], 0.0)
            };
            let (h, depth_num) = if h.is_empty() {
                let f = self.objective(&center);
                if f < best_f {
                    best_f = f;
                    best = center.clone();
                }
                let mut sub = vec![0.0; n];
                for i in 0..self.len() {
                    let g = self.row(i);
                    if dot(g, &center) > 0.0 {
                        for k in 0..n {
                            sub[k] += self.w[i] * g[k];
                        }
                    }
                }
                let hq = quad(&shape, &sub).sqrt();
                if hq == 0.0 {
                    // No positive term: the center is optimal.
                    return Ok((center, iter));
                }
                lower_bound = lower_bound.max(f - hq);
                (sub, f - best_f)
            } else {
                // Clip the infeasible center onto the constraint set for a candidate.
                let clipped = self.svec(&crate::linalg::clip_eigenvalues(&pm, lo, hi));
                let f = self.objective(&clipped);
                if f < best_f {
                    best_f = f;
                    best = clipped;
                }
                (h, violation)
            };
            let hq = quad(&shape, &h).sqrt();
            if hq <= 0.0 || !hq.is_finite() {
                break;
            }
            let alpha = depth_num / hq;
            if alpha >= 1.0 {
                // The cut removes the whole ellipsoid: nothing better remains.
                return Ok((best, iter));
            }
            if n == 1 {
                let step = shape[(0, 0)].sqrt();
                let dir = h[0].signum();
                let (left, right) = (center[0] - step, center[0] + step);
                let cut = center[0] - dir * alpha * step;
                let (l, r) = if dir > 0.0 { (left, cut) } else { (cut, right) };
                center[0] = 0.5 * (l + r);
                shape[(0, 0)] = (0.5 * (r - l)).powi(2);
                continue;
            }
            let nf = n as f64;
            let qh = &shape * DVector::from_column_slice(&h) / hq;
            let tau = (1.0 + nf * alpha) / (nf + 1.0);
            for k in 0..n {
                center[k] -= tau * qh[k];
            }
            let sigma = 2.0 * (1.0 + nf * alpha) / ((nf + 1.0) * (1.0 + alpha));
            let scale = nf * nf * (1.0 - alpha * alpha) / (nf * nf - 1.0);
            shape = symmetrize(&((&shape - sigma * &qh * qh.transpose()) * scale));
        }
        if gap_ok(best_f, lower_bound) {
            return Ok((best, config.max_iter));
        }
        Err(Error::OptimizationFailed {
            iterations: config.max_iter,
            detail: format!("gap {:e} above tolerance", best_f - lower_bound),
        })
    }
}

struct Direction {
    dp: Vec<f64>,
    ds: Vec<f64>,
    du: Vec<f64>,
    dy: Vec<f64>,
    dz: Vec<f64>,
    dxm: DMatrix<f64>,
    dsm: DMatrix<f64>,
    dtm: DMatrix<f64>,
}

/// Largest step keeping `v + α dv` strictly positive.
fn max_step_vec(v: &[f64], dv: &[f64]) -> f64 {
    v.iter().zip(dv).filter(|(_, d)| **d < 0.0).map(|(x, d)| -x / d).fold(f64::INFINITY, f64::min)
}

/// Largest step keeping `M + α D` positive definite.
fn max_step_psd(m: &DMatrix<f64>, dm: &DMatrix<f64>) -> f64 {
    let Some(chol) = m.clone().cholesky() else {
        return 0.0;
    };
    let Some(l_inv) = chol.l().try_inverse() else {
        return 0.0;
    };
    let lo = min_eigenvalue(&(&l_inv * dm * l_inv.transpose()));
    if lo < 0.0 {
        -1.0 / lo
    } else {
        f64::INFINITY
    }
}

/// Cholesky with a growing diagonal shift when the plain factorization fails.
fn regularized_cholesky(m: DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let scale = m.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut shift = 0.0;
    for _ in 0..12 {
        let shifted = &m + DMatrix::identity(m.nrows(), m.ncols()) * shift;
        if let Some(chol) = shifted.cholesky() {
            return Some(chol);
        }
        shift = if shift == 0.0 { scale * 1e-14 } else { shift * 100.0 };
    }
    None
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quad(q: &DMatrix<f64>, h: &[f64]) -> f64 {
    let v = DVector::from_column_slice(h);
    v.dot(&(q * &v)).max(0.0)
}

fn extreme_indices(values: &[f64]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[lo] {
            lo = i;
        }
        if *v > values[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

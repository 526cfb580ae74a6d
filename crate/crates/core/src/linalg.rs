//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut values: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| a.total_cmp(b));
    values
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(0.0)
}

/// Frobenius projection of a symmetric matrix onto `{lo <= eig <= hi}`.
pub fn clip_eigenvalues(m: &DMatrix<f64>, lo: f64, hi: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let clipped = eig.eigenvalues.map(|v| v.clamp(lo, hi));
    let q = &eig.eigenvectors;
    symmetrize(&(q * DMatrix::from_diagonal(&clipped) * q.transpose()))
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().iter().fold(0.0_f64, |acc, v| acc.max(*v))
}

/// Rotation in the plane spanned by `from` and `to` that maps the direction of
/// `from` onto the direction of `to`. Works in any dimension; antiparallel
/// inputs rotate by pi through the first coordinate axis not parallel to `from`.
pub fn minimal_rotation(from: &DVector<f64>, to: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = from.len();
    let (na, nb) = (from.norm(), to.norm());
    if na < 1e-300 || nb < 1e-300 {
        return Err(Error::DegenerateChain("zero-length direction".into()));
    }
    let a = from / na;
    let b = to / nb;
    let c = a.dot(&b);
    if c < -1.0 + 1e-12 {
        let mut axis = DVector::zeros(n);
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            let p = &e - &a * a.dot(&e);
            if p.norm() > 1e-6 {
                axis = p.normalize();
                break;
            }
        }
        // pi rotation in span{a, axis}
        return Ok(DMatrix::identity(n, n) - 2.0 * (&a * a.transpose()) - 2.0 * (&axis * axis.transpose()));
    }
    let k = &b * a.transpose() - &a * b.transpose();
    Ok(DMatrix::identity(n, n) + &k + (&k * &k) / (1.0 + c))
}

/// Weighted orthogonal Procrustes: the proper rotation `R` minimizing
/// `sum w_i |R p_i - q_i|^2` for already-centered point sets. Returns `None`
/// when the sets do not determine a rotation (rank < dim - 1).
pub fn kabsch(src: &[DVector<f64>], dst: &[DVector<f64>], weights: &[f64]) -> Option<DMatrix<f64>> {
    let n = src.first()?.len();
    let mut h = DMatrix::zeros(n, n);
    for ((p, q), w) in src.iter().zip(dst).zip(weights) {
        h += *w * p * q.transpose();
    }
    let scale = h.norm();
    if scale < 1e-300 {
        return None;
    }
    let svd = h.clone().svd(true, true);
    let sv = &svd.singular_values;
    let rank = sv.iter().filter(|s| **s > 1e-9 * scale).count();
    if rank + 1 < n {
        return None;
    }
    let u = svd.u?;
    let v_t = svd.v_t?;
    let v = v_t.transpose();
    let mut d = DMatrix::identity(n, n);
    if (&v * u.transpose()).determinant() < 0.0 {
        d[(n - 1, n - 1)] = -1.0;
    }
    Some(v * d * u.transpose())
}

/// Rigid motion `p -> R p + t` in R^m.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: DMatrix<f64>,
    pub translation: DVector<f64>,
}

impl RigidTransform {
    pub fn identity(dim: usize) -> Self {
        Self { rotation: DMatrix::identity(dim, dim), translation: DVector::zeros(dim) }
    }

    pub fn translation(t: DVector<f64>) -> Self {
        let dim = t.len();
        Self { rotation: DMatrix::identity(dim, dim), translation: t }
    }

    pub fn new(rotation: DMatrix<f64>, translation: DVector<f64>) -> Result<Self> {
        let dim = translation.len();
        if rotation.nrows() != dim || rotation.ncols() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: rotation.nrows() });
        }
        let ortho = (&rotation.transpose() * &rotation - DMatrix::identity(dim, dim)).norm();
        if ortho > 1e-8 || rotation.determinant() < 0.0 {
            return Err(Error::InvalidInput("rotation must be orthonormal with det +1".into()));
        }
        Ok(Self { rotation, translation })
    }

    /// Rotation about `pivot` followed by nothing else.
    pub fn rotation_about(rotation: DMatrix<f64>, pivot: &DVector<f64>) -> Self {
        let translation = pivot - &rotation * pivot;
        Self { rotation, translation }
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    pub fn apply(&self, p: &DVector<f64>) -> DVector<f64> {
        &self.rotation * p + &self.translation
    }

    pub fn apply_vector(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.rotation * v
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: &self.rotation * &other.rotation,
            translation: &self.rotation * &other.translation + &self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        let translation = -(&rt * &self.translation);
        RigidTransform { rotation: rt, translation }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_rotation_maps_direction() {
        let a = DVector::from_vec(vec![1.0, 2.0, -0.5]);
        let b = DVector::from_vec(vec![-0.3, 0.1, 2.0]);
        let r = minimal_rotation(&a, &b).unwrap();
        let mapped = &r * a.normalize();
        assert!((mapped - b.normalize()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!((&r.transpose() * &r - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn minimal_rotation_antiparallel() {
        let a = DVector::from_vec(vec![0.0, 1.0]);
        let b = DVector::from_vec(vec![0.0, -2.0]);
        let r = minimal_rotation(&a, &b).unwrap();
        assert!((&r * &a + &a).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kabsch_recovers_rotation() {
        let angle: f64 = 0.7;
        let r = DMatrix::from_row_slice(3, 3, &[angle.cos(), -angle.sin(), 0.0, angle.sin(), angle.cos(), 0.0, 0.0, 0.0, 1.0]);
        let pts = vec![
            DVector::from_vec(vec![1.0, 0.0, 0.2]),
            DVector::from_vec(vec![0.0, 1.0, -0.3]),
            DVector::from_vec(vec![-1.0, -1.0, 0.1]),
        ];
        let moved: Vec<_> = pts.iter().map(|p| &r * p).collect();
        let est = kabsch(&pts, &moved, &[1.0, 1.0, 1.0]).unwrap();
        assert!((est - r).norm() < 1e-10);
    }

    #[test]
    fn clip_eigenvalues_bounds() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, -2.0]);
        let c = clip_eigenvalues(&m, 0.5, 2.0);
        let e = sym_eigenvalues(&c);
        assert!(e[0] >= 0.5 - 1e-12 && e[1] <= 2.0 + 1e-12);
    }

    #[test]
    fn rigid_compose_inverse() {
        let r = minimal_rotation(&DVector::from_vec(vec![1.0, 0.0]), &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        let t = RigidTransform::new(r, DVector::from_vec(vec![0.3, -2.0])).unwrap();
        let id = t.compose(&t.inverse());
        assert!((id.rotation - DMatrix::identity(2, 2)).norm() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
    }
}

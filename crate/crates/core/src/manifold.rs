//! Geometry of the unit-quaternion sphere S^3.
//!
//! Tangent vectors are kept in ambient R^4 coordinates. Reduction to three
//! coordinates only ever happens through a [`TangentBasis`].

use nalgebra::{Matrix3, Matrix4, Matrix4x3, Quaternion, Rotation3, UnitQuaternion as NaUnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Geodesic angles below this are treated as zero.
pub const ZERO_ANGLE: f64 = 1e-12;
/// Tolerance on `<v, base>` accepted by [`quat_exp`].
pub const TANGENT_TOLERANCE: f64 = 1e-8;
/// Minimum `1 + <from, to>` accepted by [`parallel_transport`].
pub const ANTIPODAL_MARGIN: f64 = 1e-12;

/// Unit quaternion stored as `(w, x, y, z)` with Hamilton product convention.
///
/// Serialized as the array `[w, x, y, z]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes `(w, x, y, z)`; fails on a (near) zero vector.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        Self::from_vector(&Vector4::new(w, x, y, z))
    }

    pub fn from_vector(v: &Vector4<f64>) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::InvalidInput(format!("cannot normalize quaternion of norm {n}")));
        }
        let v = v / n;
        Ok(Self { w: v[0], x: v[1], y: v[2], z: v[3] })
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n < 1e-300 {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n * s;
        Self::normalized_unchecked(c, a.x, a.y, a.z)
    }

    /// Rotation vector (axis times angle) to quaternion.
    pub fn from_rotation_vector(rv: &Vector3<f64>) -> Self {
        Self::from_axis_angle(rv, rv.norm())
    }

    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Self {
        let q = NaUnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
        Self::normalized_unchecked(q.w, q.i, q.j, q.k)
    }

    fn normalized_unchecked(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self { w: w / n, x: x / n, y: y / n, z: z / n }
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn coords(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn vector_part(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn dot(&self, other: &UnitQuaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn negated(&self) -> Self {
        Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn conjugate(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product `self ∘ rhs`.
    pub fn compose(&self, rhs: &UnitQuaternion) -> Self {
        let v = left_multiplication(self) * rhs.coords();
        Self::normalized_unchecked(v[0], v[1], v[2], v[3])
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        self.to_nalgebra().to_rotation_matrix().into_inner()
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.to_nalgebra() * v
    }

    /// Axis times rotation angle of the rotation this quaternion represents,
    /// angle in `[0, pi]` (sign of the quaternion does not matter).
    pub fn to_rotation_vector(&self) -> Vector3<f64> {
        let (w, v) = if self.w < 0.0 { (-self.w, -self.vector_part()) } else { (self.w, self.vector_part()) };
        let s = v.norm();
        if s < 1e-300 {
            return Vector3::zeros();
        }
        let half = s.atan2(w);
        v * (2.0 * half / s)
    }

    /// Rotation angle in `[0, pi]` between the rotations `self` and `other`.
    pub fn rotation_angle_to(&self, other: &UnitQuaternion) -> f64 {
        self.conjugate().compose(other).to_rotation_vector().norm()
    }

    fn to_nalgebra(self) -> NaUnitQuaternion<f64> {
        NaUnitQuaternion::new_unchecked(Quaternion::new(self.w, self.x, self.y, self.z))
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl std::ops::Mul for UnitQuaternion {
    type Output = UnitQuaternion;
    fn mul(self, rhs: UnitQuaternion) -> UnitQuaternion {
        self.compose(&rhs)
    }
}

impl TryFrom<[f64; 4]> for UnitQuaternion {
    type Error = Error;
    fn try_from(v: [f64; 4]) -> Result<Self> {
        let q = Vector4::from(v);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("quaternion {v:?} is not unit norm")));
        }
        Self::from_vector(&q)
    }
}

impl From<UnitQuaternion> for [f64; 4] {
    fn from(q: UnitQuaternion) -> [f64; 4] {
        [q.w, q.x, q.y, q.z]
    }
}

/// Matrix `L(q)` with `q ∘ p = L(q) p` on `(w, x, y, z)` coordinates. It is
/// orthogonal for unit `q`, so it is an isometry of S^3 mapping tangent spaces
/// onto tangent spaces.
pub fn left_multiplication(q: &UnitQuaternion) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

/// A tangent vector together with its base point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentVector {
    pub base: UnitQuaternion,
    pub coords: Vector4<f64>,
}

impl TangentVector {
    pub fn norm(&self) -> f64 {
        self.coords.norm()
    }
}

/// Riemannian logarithm at `base`. A target in the opposite hemisphere is
/// replaced by its negation first, so the result is always the shortest
/// representative of the rotation.
pub fn quat_log(base: &UnitQuaternion, target: &UnitQuaternion) -> TangentVector {
    let b = base.coords();
    let mut t = target.coords();
    let mut c = b.dot(&t);
    if c < 0.0 {
        t = -t;
        c = -c;
    }
    let u = t - b * c;
    let s = u.norm();
    let theta = s.atan2(c);
    let coords = if theta < ZERO_ANGLE || s == 0.0 { Vector4::zeros() } else { u * (theta / s) };
    TangentVector { base: *base, coords }
}

/// Riemannian exponential at `base`.
pub fn quat_exp(base: &UnitQuaternion, v: &Vector4<f64>) -> Result<UnitQuaternion> {
    let b = base.coords();
    let deviation = b.dot(v).abs();
    if deviation > TANGENT_TOLERANCE {
        return Err(Error::InvalidTangent { deviation });
    }
    let theta = v.norm();
    if theta == 0.0 {
        return Ok(*base);
    }
    let q = b * theta.cos() + v * (theta.sin() / theta);
    UnitQuaternion::from_vector(&q)
}

/// Linear map of parallel transport along the minimizing geodesic from
/// `from` to `to`, valid on vectors tangent at `from`.
pub fn transport_matrix(from: &UnitQuaternion, to: &UnitQuaternion) -> Result<Matrix4<f64>> {
    let c = from.dot(to);
    if 1.0 + c < ANTIPODAL_MARGIN {
        return Err(Error::DegenerateTransport);
    }
    let p = from.coords();
    let q = to.coords();
    Ok(Matrix4::identity() - (p + q) * q.transpose() / (1.0 + c))
}

/// Parallel transport of `v` (tangent at `from`) to the tangent space at `to`.
pub fn parallel_transport(from: &UnitQuaternion, to: &UnitQuaternion, v: &Vector4<f64>) -> Result<TangentVector> {
    let c = from.dot(to);
    if 1.0 + c < ANTIPODAL_MARGIN {
        return Err(Error::DegenerateTransport);
    }
    let p = from.coords();
    let q = to.coords();
    let coords = v - (p + q) * (q.dot(v) / (1.0 + c));
    Ok(TangentVector { base: *to, coords })
}

/// Orthonormal basis of the tangent space (the null space of the base
/// quaternion) stored as the columns of a 4x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentBasis {
    pub base: UnitQuaternion,
    pub columns: Matrix4x3<f64>,
}

impl TangentBasis {
    /// `Λᵀ v`
    pub fn reduce(&self, v: &Vector4<f64>) -> Vector3<f64> {
        self.columns.transpose() * v
    }

    /// `Λ v`
    pub fn lift(&self, v: &Vector3<f64>) -> Vector4<f64> {
        self.columns * v
    }

    pub fn reduce_covariance(&self, cov: &Matrix4<f64>) -> Matrix3<f64> {
        self.columns.transpose() * cov * self.columns
    }

    pub fn lift_covariance(&self, cov: &Matrix3<f64>) -> Matrix4<f64> {
        self.columns * cov * self.columns.transpose()
    }

    /// Basis carried to `to` by parallel transport, still orthonormal and
    /// tangent at `to`.
    pub fn transported(&self, to: &UnitQuaternion) -> Result<TangentBasis> {
        let t = transport_matrix(&self.base, to)?;
        Ok(TangentBasis { base: *to, columns: t * self.columns })
    }

    /// Basis carried by left multiplication with `q` (a rigid rotation of S^3).
    pub fn left_translated(&self, q: &UnitQuaternion) -> TangentBasis {
        let l = left_multiplication(q);
        TangentBasis { base: q.compose(&self.base), columns: l * self.columns }
    }
}

/// Deterministic basis of `Null(q)`.
///
/// The standard basis vector most aligned with `q` is dropped; the remaining
/// three are Gram-Schmidt orthogonalized (twice) against `q` and each other in
/// index order. Each column's first non-negligible entry is made positive.
pub fn tangent_basis(q: &UnitQuaternion) -> TangentBasis {
    let qv = q.coords();
    let pivot = (0..4).fold(0, |best, i| if qv[i].abs() > qv[best].abs() { i } else { best });
    let mut columns = Matrix4x3::zeros();
    for (col, i) in (0..4).filter(|i| *i != pivot).enumerate() {
        let mut v = Vector4::zeros();
        v[i] = 1.0;
        for _ in 0..2 {
            v -= qv * qv.dot(&v);
            for j in 0..col {
                let c = columns.column(j).into_owned();
                v -= c * c.dot(&v);
            }
        }
        v /= v.norm();
        if let Some(first) = v.iter().find(|e| e.abs() > 1e-12) {
            if *first < 0.0 {
                v = -v;
            }
        }
        columns.set_column(col, &v);
    }
    TangentBasis { base: *q, columns }
}

/// Removes double-cover sign jumps from a quaternion sequence: the first
/// element gets `w >= 0` (ties broken on x, then y, then z) and every later
/// element is flipped when its dot product with its predecessor is negative.
pub fn canonicalize_signs(quats: &[UnitQuaternion]) -> Vec<UnitQuaternion> {
    let mut out = Vec::with_capacity(quats.len());
    let Some(first) = quats.first() else {
        return out;
    };
    let lead = [first.w, first.x, first.y, first.z].into_iter().find(|c| c.abs() > 1e-12).unwrap_or(1.0);
    let mut prev = if lead < 0.0 { first.negated() } else { *first };
    out.push(prev);
    for q in &quats[1..] {
        let next = if prev.dot(q) < 0.0 { q.negated() } else { *q };
        out.push(next);
        prev = next;
    }
    out
}

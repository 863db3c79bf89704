//! Rigid transforms, 6D rotations and the canonical-frame construction.
//!
//! Conventions:
//! - world up is `+y`, the floor is the plane `y = 0`;
//! - the forward axis of a root frame is its local `+z` column;
//! - a [`RigidTransform`] is a pose `X -> world`: `apply(p) = R p + t`;
//! - the 6D encoding stores the first rotation column followed by the second.

use std::ops::Mul;

use thiserror::Error;

use crate::scalar::Real;

pub type Vec3<T> = [T; 3];
/// Row-major 3x3 matrix, `m[row][col]`.
pub type Mat3<T> = [[T; 3]; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate 6D rotation: columns are zero or parallel")]
    DegenerateRotation,
    #[error("matrix is not a rotation (orthonormality error {0:e})")]
    NotARotation(f64),
    #[error("root forward axis is parallel to world up and no fallback heading was given")]
    GimbalDegenerate,
}

const DEGENERATE_EPS: f64 = 1e-8;
const ROTATION_TOL: f64 = 1e-6;
const GIMBAL_EPS: f64 = 1e-6;

pub fn dot<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm<T: Real>(a: &Vec3<T>) -> T {
    dot(a, a).sqrt()
}

pub fn add3<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale3<T: Real>(a: &Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn mat_identity<T: Real>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn mat_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat_vec<T: Real>(a: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn transpose<T: Real>(a: &Mat3<T>) -> Mat3<T> {
    let mut out = *a;
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[j][i];
        }
    }
    out
}

pub fn column<T: Real>(a: &Mat3<T>, c: usize) -> Vec3<T> {
    [a[0][c], a[1][c], a[2][c]]
}

pub fn from_columns<T: Real>(c0: &Vec3<T>, c1: &Vec3<T>, c2: &Vec3<T>) -> Mat3<T> {
    [
        [c0[0], c1[0], c2[0]],
        [c0[1], c1[1], c2[1]],
        [c0[2], c1[2], c2[2]],
    ]
}

pub fn determinant<T: Real>(a: &Mat3<T>) -> T {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Largest absolute entry of `RᵀR − I`, combined with `|det R − 1|`.
pub fn orthonormality_error<T: Real>(r: &Mat3<T>) -> T {
    let rtr = mat_mul(&transpose(r), r);
    let id = mat_identity::<T>();
    let mut err = (determinant(r) - T::one()).abs();
    for i in 0..3 {
        for j in 0..3 {
            err = err.max((rtr[i][j] - id[i][j]).abs());
        }
    }
    err
}

/// Rotation by `angle` radians about a unit `axis` (Rodrigues).
pub fn axis_angle<T: Real>(axis: &Vec3<T>, angle: T) -> Mat3<T> {
    let n = norm(axis);
    let k = scale3(axis, T::one() / n);
    let (s, c) = angle.sin_cos();
    let v = T::one() - c;
    [
        [c + k[0] * k[0] * v, k[0] * k[1] * v - k[2] * s, k[0] * k[2] * v + k[1] * s],
        [k[1] * k[0] * v + k[2] * s, c + k[1] * k[1] * v, k[1] * k[2] * v - k[0] * s],
        [k[2] * k[0] * v - k[1] * s, k[2] * k[1] * v + k[0] * s, c + k[2] * k[2] * v],
    ]
}

pub fn rot_x<T: Real>(angle: T) -> Mat3<T> {
    let (s, c) = angle.sin_cos();
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, c, -s], [z, s, c]]
}

/// Rotation about world up (yaw).
pub fn rot_y<T: Real>(angle: T) -> Mat3<T> {
    let (s, c) = angle.sin_cos();
    let (o, z) = (T::one(), T::zero());
    [[c, z, s], [z, o, z], [-s, z, c]]
}

pub fn rot_z<T: Real>(angle: T) -> Mat3<T> {
    let (s, c) = angle.sin_cos();
    let (o, z) = (T::one(), T::zero());
    [[c, -s, z], [s, c, z], [z, z, o]]
}

/// Continuous 6D rotation code: first column then second column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation6D<T>(pub [T; 6]);

impl<T: Real> Rotation6D<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Rotation6D([o, z, z, z, o, z])
    }

    pub fn from_slice(v: &[T]) -> Self {
        let mut out = [T::zero(); 6];
        out.copy_from_slice(&v[..6]);
        Rotation6D(out)
    }

    pub fn to_matrix(&self) -> Result<Mat3<T>, GeometryError> {
        rot6d_to_matrix(self)
    }
}

/// Gram–Schmidt decode of a 6D rotation.
pub fn rot6d_to_matrix<T: Real>(v: &Rotation6D<T>) -> Result<Mat3<T>, GeometryError> {
    let eps = T::lit(DEGENERATE_EPS);
    let a1 = [v.0[0], v.0[1], v.0[2]];
    let a2 = [v.0[3], v.0[4], v.0[5]];
    let n1 = norm(&a1);
    let n2 = norm(&a2);
    if !(n1 > eps && n2 > eps) {
        return Err(GeometryError::DegenerateRotation);
    }
    let e1 = scale3(&a1, T::one() / n1);
    let u2 = sub3(&a2, &scale3(&e1, dot(&e1, &a2)));
    let nu = norm(&u2);
    // parallel test on the unit-scaled second column
    if !(nu / n2 > eps) {
        return Err(GeometryError::DegenerateRotation);
    }
    let e2 = scale3(&u2, T::one() / nu);
    let e3 = cross(&e1, &e2);
    Ok(from_columns(&e1, &e2, &e3))
}

pub fn matrix_to_rot6d<T: Real>(r: &Mat3<T>) -> Result<Rotation6D<T>, GeometryError> {
    let err = orthonormality_error(r);
    if !(err <= T::lit(ROTATION_TOL)) {
        return Err(GeometryError::NotARotation(err.to_f64_lossy()));
    }
    Ok(Rotation6D([r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]]))
}

/// Angle of the relative rotation `Raᵀ Rb`.
///
/// Evaluates `arccos((tr(RaᵀRb) − 1)/2)` with the argument clamped to `[−1, 1]`.
/// For small angles the algebraically equal chordal form
/// `2·asin(‖Ra − Rb‖_F / (2√2))` is used, since arccos loses half the
/// available digits near 1.
pub fn geodesic_distance<T: Real>(ra: &Mat3<T>, rb: &Mat3<T>) -> T {
    let two = T::lit(2.0);
    let mut tr = T::zero();
    let mut chord2 = T::zero();
    for i in 0..3 {
        for j in 0..3 {
            tr += ra[i][j] * rb[i][j];
            let d = ra[i][j] - rb[i][j];
            chord2 += d * d;
        }
    }
    let c = ((tr - T::one()) / two).max(-T::one()).min(T::one());
    if c > T::lit(0.5) {
        let s = (chord2.sqrt() / (two * two.sqrt())).min(T::one());
        (two * s.asin()).abs()
    } else {
        c.acos().abs()
    }
}

/// Rigid transform (pose) mapping local coordinates into the parent frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T> {
    pub r: Mat3<T>,
    pub t: Vec3<T>,
}

impl<T: Real> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        Self { r: mat_identity(), t: [T::zero(); 3] }
    }

    /// All-zero sentinel used for absent partner slots; not a valid transform.
    pub fn zeroed() -> Self {
        Self { r: [[T::zero(); 3]; 3], t: [T::zero(); 3] }
    }

    pub fn is_zeroed(&self) -> bool {
        self.r.iter().flatten().chain(self.t.iter()).all(|v| *v == T::zero())
    }

    pub fn new(r: Mat3<T>, t: Vec3<T>) -> Self {
        Self { r, t }
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Self { r: mat_identity(), t }
    }

    pub fn from_rotation(r: Mat3<T>) -> Self {
        Self { r, t: [T::zero(); 3] }
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self {
            r: mat_mul(&self.r, &other.r),
            t: add3(&mat_vec(&self.r, &other.t), &self.t),
        }
    }

    pub fn invert(&self) -> Self {
        let rt = transpose(&self.r);
        let t = mat_vec(&rt, &self.t);
        Self { r: rt, t: [-t[0], -t[1], -t[2]] }
    }

    pub fn apply(&self, p: &Vec3<T>) -> Vec3<T> {
        add3(&mat_vec(&self.r, p), &self.t)
    }

    /// 9D encoding: 6D rotation then translation.
    pub fn to_9d(&self) -> [T; 9] {
        let r = &self.r;
        [r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1], self.t[0], self.t[1], self.t[2]]
    }

    pub fn from_9d(v: &[T]) -> Result<Self, GeometryError> {
        let r = rot6d_to_matrix(&Rotation6D::from_slice(&v[..6]))?;
        Ok(Self { r, t: [v[6], v[7], v[8]] })
    }

    /// 12-number encoding: row-major R then t.
    pub fn to_12(&self) -> [T; 12] {
        let r = &self.r;
        [
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2], self.t[0], self.t[1],
            self.t[2],
        ]
    }

    pub fn from_12(v: &[T]) -> Self {
        Self {
            r: [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]],
            t: [v[9], v[10], v[11]],
        }
    }

    pub fn cast<U: Real>(&self) -> RigidTransform<U> {
        let c = |x: T| U::lit(x.to_f64_lossy());
        RigidTransform {
            r: self.r.map(|row| row.map(c)),
            t: self.t.map(c),
        }
    }

    /// Rotation geodesic plus Euclidean translation distance; used by tests.
    pub fn distance(&self, other: &Self) -> T {
        geodesic_distance(&self.r, &other.r) + norm(&sub3(&self.t, &other.t))
    }
}

impl<T: Real> Mul for RigidTransform<T> {
    type Output = RigidTransform<T>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.compose(&rhs)
    }
}

pub fn compose<T: Real>(a: &RigidTransform<T>, b: &RigidTransform<T>) -> RigidTransform<T> {
    a.compose(b)
}

pub fn invert<T: Real>(a: &RigidTransform<T>) -> RigidTransform<T> {
    a.invert()
}

/// Split of a root pose into a floor-projected heading frame and the residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalDecomposition<T> {
    /// Pose of the canonical frame in world coordinates.
    pub canonical: RigidTransform<T>,
    /// Pose of the root in canonical coordinates.
    pub can_to_root: RigidTransform<T>,
}

/// Yaw angle of the projected forward axis, or `None` when it is vertical.
pub fn heading_of<T: Real>(r: &Mat3<T>) -> Option<T> {
    let f = column(r, 2);
    let horiz = (f[0] * f[0] + f[2] * f[2]).sqrt();
    if horiz <= T::lit(GIMBAL_EPS) {
        return None;
    }
    Some(f[0].atan2(f[2]))
}

/// Heading-only canonical frame at the floor projection of `root_world`.
///
/// `fallback_heading` (yaw, radians) is used when the forward axis is vertical.
pub fn canonicalize<T: Real>(
    root_world: &RigidTransform<T>,
    fallback_heading: Option<T>,
) -> Result<CanonicalDecomposition<T>, GeometryError> {
    let yaw = match heading_of(&root_world.r) {
        Some(y) => y,
        None => fallback_heading.ok_or(GeometryError::GimbalDegenerate)?,
    };
    let canonical = RigidTransform {
        r: rot_y(yaw),
        t: [root_world.t[0], T::zero(), root_world.t[2]],
    };
    let mut can_to_root = canonical.invert().compose(root_world);
    // the horizontal offset vanishes analytically; remove rounding residue
    can_to_root.t[0] = T::zero();
    can_to_root.t[2] = T::zero();
    Ok(CanonicalDecomposition { canonical, can_to_root })
}

/// `Ta⁻¹ ∘ Tb`: pose of `b` expressed in `a`'s frame.
pub fn relative_transform<T: Real>(a_world: &RigidTransform<T>, b_world: &RigidTransform<T>) -> RigidTransform<T> {
    a_world.invert().compose(b_world)
}

/// One-step propagation of a self-to-partner transform:
/// `dSelf⁻¹ ∘ T_prev ∘ dPartner`, where each delta maps frame `t−1` to `t`.
pub fn propagate_partner_transform<T: Real>(
    prev: &RigidTransform<T>,
    d_self: &RigidTransform<T>,
    d_partner: &RigidTransform<T>,
) -> RigidTransform<T> {
    d_self.invert().compose(prev).compose(d_partner)
}

/// Reflection across the `x = 0` plane applied to a pose: `M R M`, `M t`.
pub fn mirror_x<T: Real>(tr: &RigidTransform<T>) -> RigidTransform<T> {
    RigidTransform { r: mirror_rotation(&tr.r), t: [-tr.t[0], tr.t[1], tr.t[2]] }
}

/// Conjugation of a rotation by `diag(−1, 1, 1)`.
pub fn mirror_rotation<T: Real>(r: &Mat3<T>) -> Mat3<T> {
    let mut out = *r;
    out[0][1] = -out[0][1];
    out[0][2] = -out[0][2];
    out[1][0] = -out[1][0];
    out[2][0] = -out[2][0];
    out
}

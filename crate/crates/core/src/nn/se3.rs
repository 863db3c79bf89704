//! Differentiable rigid-transform algebra over rows.
//!
//! Rotations are `[n, 9]` row-major 3x3 matrices, translations `[n, 3]`,
//! 9D transform codes `[n, 9]` (6D rotation then translation).

use crate::nn::tape::Var;
use crate::scalar::Real;

/// Floor inside the norm in Gram–Schmidt; keeps the decode finite on
/// near-zero predictions without affecting ordinary inputs.
const NORM_FLOOR: f64 = 1e-20;

fn permute<'t, T: Real>(x: Var<'t, T>, perm: [usize; 3]) -> Var<'t, T> {
    let n = x.rows();
    let index = (0..n).flat_map(|r| perm.iter().map(move |&c| r * 3 + c)).collect();
    x.gather(index, vec![n, 3])
}

fn normalize_rows<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    let n = x.square().sum_rows().add_scalar(T::lit(NORM_FLOOR)).sqrt();
    x.div_col(n)
}

pub fn cross<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    let (yzx, zxy) = ([1, 2, 0], [2, 0, 1]);
    permute(a, yzx).mul(permute(b, zxy)).sub(permute(a, zxy).mul(permute(b, yzx)))
}

/// Gram–Schmidt decode of `[n, 6]` codes (first column, second column) into
/// row-major matrices.
pub fn rot6d_to_matrix<'t, T: Real>(v: Var<'t, T>) -> Var<'t, T> {
    let a1 = v.cols_slice(0, 3);
    let a2 = v.cols_slice(3, 6);
    let e1 = normalize_rows(a1);
    let d = e1.mul(a2).sum_rows();
    let e2 = normalize_rows(a2.sub(e1.mul_col(d)));
    let e3 = cross(e1, e2);
    columns_to_matrix(e1, e2, e3)
}

/// Row-major matrix from three `[n, 3]` columns.
pub fn columns_to_matrix<'t, T: Real>(c0: Var<'t, T>, c1: Var<'t, T>, c2: Var<'t, T>) -> Var<'t, T> {
    let cat = Var::concat_cols(&[c0, c1, c2]);
    let n = cat.rows();
    // cat row holds column-major entries; entry (i, k) sits at k*3 + i
    let index = (0..n).flat_map(|r| (0..9).map(move |e| r * 9 + (e % 3) * 3 + e / 3)).collect();
    cat.gather(index, vec![n, 9])
}

pub fn transpose3<'t, T: Real>(r: Var<'t, T>) -> Var<'t, T> {
    let n = r.rows();
    let index = (0..n).flat_map(|row| (0..9).map(move |e| row * 9 + (e % 3) * 3 + e / 3)).collect();
    r.gather(index, vec![n, 9])
}

pub fn mat_mul3<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    a.batch_matmul(b, 3, 3, 3)
}

pub fn mat_vec3<'t, T: Real>(r: Var<'t, T>, v: Var<'t, T>) -> Var<'t, T> {
    r.batch_matmul(v, 3, 3, 1)
}

/// `(R, t)` pair on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TfVar<'t, T: Real> {
    pub r: Var<'t, T>,
    pub t: Var<'t, T>,
}

impl<'t, T: Real> TfVar<'t, T> {
    /// Decodes `[n, 9]` transform codes.
    pub fn from_9d(v: Var<'t, T>) -> Self {
        Self { r: rot6d_to_matrix(v.cols_slice(0, 6)), t: v.cols_slice(6, 9) }
    }

    pub fn compose(self, other: Self) -> Self {
        Self { r: mat_mul3(self.r, other.r), t: mat_vec3(self.r, other.t).add(self.t) }
    }

    pub fn invert(self) -> Self {
        let rt = transpose3(self.r);
        Self { r: rt, t: mat_vec3(rt, self.t).neg() }
    }

    pub fn select_rows(self, rows: &[usize]) -> Self {
        Self { r: self.r.select_rows(rows), t: self.t.select_rows(rows) }
    }
}

/// Rotation angle between row-matched rotations, `[n, 1]`:
/// `2·asin(‖Ra − Rb‖_F / (2√2))`.
pub fn geodesic<'t, T: Real>(ra: Var<'t, T>, rb: Var<'t, T>) -> Var<'t, T> {
    let chord = ra.sub(rb).square().sum_rows().sqrt();
    chord.scale(T::one() / T::lit(8.0f64.sqrt())).asin().scale(T::lit(2.0))
}

/// Smooth-L1 summed over the last axis, `[n, 1]`.
pub fn smooth_l1_rows<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>, delta: T) -> Var<'t, T> {
    a.sub(b).smooth_l1(delta).sum_rows()
}

/// `d_T = d_R + smooth-L1(Δt)` per row, `[n, 1]`.
pub fn transform_distance<'t, T: Real>(a: TfVar<'t, T>, b: TfVar<'t, T>, delta: T) -> Var<'t, T> {
    geodesic(a.r, b.r).add(smooth_l1_rows(a.t, b.t, delta))
}

//! The 8 orthonormal homography-flow bases.
//!
//! A homography flow on a fixed grid lives in an 8-D subspace of all dense
//! flows. The subspace is spanned by the derivatives of the homography flow
//! with respect to the eight free matrix entries at the identity (the tangent
//! fields). Construction normalizes each tangent field by its largest flow
//! magnitude and orthonormalizes the stacked columns with a Householder QR
//! whose R diagonal is forced positive, so the result is deterministic.
//!
//! Bases are expressed over normalized coordinates `u = x / ((W-1)/2)`,
//! `v = y / ((H-1)/2)` in `[-1, 1]^2`, which makes basis weights independent
//! of grid resolution. Columns flatten row-major over pixels, the dx block
//! first, then the dy block.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};

use crate::error::{Error, Result};
use crate::geometry::{centered_x, centered_y, FlowField, Point2};

/// Number of flow bases (the degrees of freedom of a homography).
pub const NUM_BASES: usize = 8;

/// Tag recording the coordinate scaling baked into serialized bases/weights.
pub const CONVENTION: &str = "centered-normalized";

type Matrix8 = SMatrix<f64, 8, 8>;
type Vector8 = SVector<f64, 8>;

/// The 8 combination coefficients of Eq-style basis synthesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisWeights(pub [f64; 8]);

impl BasisWeights {
    pub fn zeros() -> Self {
        Self([0.0; 8])
    }

    /// Unit vector along basis `k` (0-based).
    pub fn unit(k: usize) -> Self {
        let mut a = [0.0; 8];
        a[k] = 1.0;
        Self(a)
    }

    pub fn as_slice(&self) -> &[f64; 8] {
        &self.0
    }

    /// Max-abs difference to another weight vector.
    pub fn max_abs_diff(&self, other: &BasisWeights) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// The orthonormalized flow bases for one grid size, plus the QR factors.
#[derive(Debug, Clone)]
pub struct BasisSet {
    width: usize,
    height: usize,
    /// 2HW x 8, orthonormal columns in normalized coordinates.
    q: DMatrix<f64>,
    /// 8 x 8 upper triangular with positive diagonal.
    r: Matrix8,
    r_inv: Matrix8,
    /// Per-field max-magnitude normalizers applied before QR.
    norms: [f64; 8],
}

/// Analytic normalized tangent field `k` at normalized coordinates (u, v),
/// ordered by the perturbed matrix entry (1,1),(1,2),(1,3),(2,1),(2,2),
/// (2,3),(3,1),(3,2).
#[inline]
fn tangent_at(k: usize, u: f64, v: f64) -> (f64, f64) {
    match k {
        0 => (u, 0.0),
        1 => (v, 0.0),
        2 => (1.0, 0.0),
        3 => (0.0, u),
        4 => (0.0, v),
        5 => (0.0, 1.0),
        6 => (-u * u, -u * v),
        7 => (-u * v, -v * v),
        _ => unreachable!("basis index out of range"),
    }
}

fn grid_coords(width: usize, height: usize) -> (Vec<f64>, Vec<f64>) {
    let half_w = (width as f64 - 1.0) / 2.0;
    let half_h = (height as f64 - 1.0) / 2.0;
    let us = (0..width).map(|j| centered_x(j, width) / half_w).collect();
    let vs = (0..height)
        .map(|i| centered_y(i, height) / half_h)
        .collect();
    (us, vs)
}

/// The 8 analytic tangent fields over the normalized grid, in entry order.
/// Values are in normalized coordinate units.
pub fn tangent_fields(width: usize, height: usize) -> Result<[FlowField; 8]> {
    if width < 2 || height < 2 {
        return Err(Error::InvalidConfig(format!(
            "grid must be at least 2x2, got {width}x{height}"
        )));
    }
    let (us, vs) = grid_coords(width, height);
    let hw = width * height;
    Ok(std::array::from_fn(|k| {
        let mut data = vec![0.0; 2 * hw];
        for (i, &v) in vs.iter().enumerate() {
            for (j, &u) in us.iter().enumerate() {
                let (dx, dy) = tangent_at(k, u, v);
                data[i * width + j] = dx;
                data[hw + i * width + j] = dy;
            }
        }
        FlowField::from_raw(width, height, data)
    }))
}

/// Finite-difference validation oracle for [`tangent_fields`]: field `k` is
/// the flow of the identity homography with matrix entry `k` set to `eps`,
/// evaluated over the normalized grid and divided by `eps`. Affine entries
/// reproduce the tangent fields exactly; the two perspective entries converge
/// at rate O(eps).
pub fn finite_difference_fields(
    width: usize,
    height: usize,
    eps: f64,
) -> Result<[FlowField; 8]> {
    if !(eps > 0.0 && eps <= 0.1) {
        return Err(Error::InvalidConfig(format!(
            "eps must lie in (0, 0.1], got {eps}"
        )));
    }
    if width < 2 || height < 2 {
        return Err(Error::InvalidConfig(format!(
            "grid must be at least 2x2, got {width}x{height}"
        )));
    }
    let (us, vs) = grid_coords(width, height);
    let hw = width * height;
    let entry_pos = [
        (0, 0),
        (0, 1),
        (0, 2),
        (1, 0),
        (1, 1),
        (1, 2),
        (2, 0),
        (2, 1),
    ];
    let mut fields = Vec::with_capacity(8);
    for &(r, c) in entry_pos.iter() {
        let mut m = [[0.0; 3]; 3];
        (0..3).for_each(|d| m[d][d] = 1.0);
        m[r][c] += eps;
        let h = crate::geometry::Homography::from_matrix(m)?;
        let mut data = vec![0.0; 2 * hw];
        for (i, &v) in vs.iter().enumerate() {
            for (j, &u) in us.iter().enumerate() {
                let p = h.apply(Point2::new(u, v))?;
                data[i * width + j] = (p.x - u) / eps;
                data[hw + i * width + j] = (p.y - v) / eps;
            }
        }
        fields.push(FlowField::from_raw(width, height, data));
    }
    Ok(fields
        .try_into()
        .expect("exactly 8 fields were constructed"))
}

impl BasisSet {
    /// Builds the basis set: tangent fields, per-field max-magnitude
    /// normalization, then a sign-fixed Householder QR of the 2HW x 8 stack.
    pub fn build(width: usize, height: usize) -> Result<Self> {
        if width < 3 || height < 3 {
            return Err(Error::InvalidConfig(format!(
                "grid must be at least 3x3, got {width}x{height}"
            )));
        }
        let fields = tangent_fields(width, height)?;
        let hw = width * height;
        let mut norms = [0.0; 8];
        let mut m = DMatrix::<f64>::zeros(2 * hw, 8);
        for (k, field) in fields.iter().enumerate() {
            let norm = field.max_magnitude();
            if norm <= 0.0 {
                return Err(Error::RankDeficient(format!(
                    "tangent field {k} has zero magnitude"
                )));
            }
            norms[k] = norm;
            let mut col = m.column_mut(k);
            for (dst, src) in col.iter_mut().zip(field.data()) {
                *dst = src / norm;
            }
        }

        let qr = m.qr();
        let (mut q, r_full) = (qr.q(), qr.r());
        let mut r = Matrix8::zeros();
        for i in 0..8 {
            for j in 0..8 {
                r[(i, j)] = r_full[(i, j)];
            }
        }
        // Fix the sign convention: R diagonal strictly positive.
        for i in 0..8 {
            if r[(i, i)] < 0.0 {
                for j in 0..8 {
                    r[(i, j)] = -r[(i, j)];
                }
                q.column_mut(i).neg_mut();
            }
            if r[(i, i)].abs() < 1e-9 {
                return Err(Error::RankDeficient(format!(
                    "R[{i}][{i}] = {} below 1e-9",
                    r[(i, i)]
                )));
            }
        }
        let r_inv = invert_upper_triangular(&r);
        Ok(Self {
            width,
            height,
            q,
            r,
            r_inv,
            norms,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// The orthonormal 2HW x 8 column stack (normalized coordinates).
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// The 8x8 upper-triangular QR factor.
    pub fn r(&self) -> &Matrix8 {
        &self.r
    }

    /// Per-field max-magnitude normalizers applied before QR.
    pub fn norms(&self) -> &[f64; 8] {
        &self.norms
    }

    /// Half extents of the pixel grid; the normalized-to-pixel scale factors.
    pub fn pixel_scale(&self) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    /// Basis column `k` as a pixel-unit flow field (`synthesize` of `e_k`).
    pub fn basis_flow(&self, k: usize) -> FlowField {
        self.synthesize(&BasisWeights::unit(k))
    }

    /// Dense pixel-unit flow of a weight vector: unflatten `Q * alpha` and
    /// convert from normalized to pixel units.
    pub fn synthesize(&self, w: &BasisWeights) -> FlowField {
        let alpha = Vector8::from_column_slice(w.as_slice());
        let flat = &self.q * alpha;
        let hw = self.width * self.height;
        let (sx, sy) = self.pixel_scale();
        let mut data = vec![0.0; 2 * hw];
        for i in 0..hw {
            data[i] = flat[i] * sx;
            data[hw + i] = flat[hw + i] * sy;
        }
        FlowField::from_raw(self.width, self.height, data)
    }

    /// Projects a pixel-unit flow onto the basis: returns the weights
    /// `alpha = Qᵀ v` (with `v` the normalized flattened flow) and the
    /// relative projection residual `|v - Q alpha| / max(|v|, 1e-12)`.
    pub fn analyze(&self, f: &FlowField) -> Result<(BasisWeights, f64)> {
        if f.width() != self.width || f.height() != self.height {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", self.width, self.height),
                got: format!("{}x{}", f.width(), f.height()),
            });
        }
        let hw = self.width * self.height;
        let (sx, sy) = self.pixel_scale();
        let mut v = DVector::<f64>::zeros(2 * hw);
        let data = f.data();
        for i in 0..hw {
            v[i] = data[i] / sx;
            v[hw + i] = data[hw + i] / sy;
        }
        let alpha = self.q.tr_mul(&v);
        let recon = &self.q * &alpha;
        let norm_v = v.norm();
        let residual = (v - recon).norm() / norm_v.max(1e-12);
        let mut w = [0.0; 8];
        w.copy_from_slice(alpha.as_slice());
        Ok((BasisWeights(w), residual))
    }

    /// Continuous extension of the basis columns: since `Q = M R⁻¹`, the
    /// basis value at any real point is `q_i(p) = sum_j m_j(p) (R⁻¹)_ji`
    /// with `m_j` the normalized analytic tangent fields. At grid points
    /// this agrees with the stored columns. One `[dx, dy]` row per basis.
    pub fn evaluate_at(&self, points: &[Point2]) -> Vec<[[f64; 2]; 8]> {
        let (sx, sy) = self.pixel_scale();
        points
            .iter()
            .map(|p| {
                let u = p.x / sx;
                let v = p.y / sy;
                let mut m_vals = [[0.0; 2]; 8];
                for (k, val) in m_vals.iter_mut().enumerate() {
                    let (dx, dy) = tangent_at(k, u, v);
                    val[0] = dx / self.norms[k];
                    val[1] = dy / self.norms[k];
                }
                let mut out = [[0.0; 2]; 8];
                for i in 0..8 {
                    let mut dx = 0.0;
                    let mut dy = 0.0;
                    // R⁻¹ is upper triangular: only j <= i contributes.
                    for (j, m_val) in m_vals.iter().enumerate().take(i + 1) {
                        let w = self.r_inv[(j, i)];
                        dx += m_val[0] * w;
                        dy += m_val[1] * w;
                    }
                    out[i] = [dx, dy];
                }
                out
            })
            .collect()
    }

    /// Basis row pair of grid pixel (i, j) straight from the stored Q, in
    /// pixel units: `bx[k] = sx * Q[idx][k]`, `by[k] = sy * Q[hw+idx][k]`.
    pub(crate) fn pixel_basis_rows(&self, i: usize, j: usize) -> ([f64; 8], [f64; 8]) {
        let hw = self.width * self.height;
        let idx = i * self.width + j;
        let (sx, sy) = self.pixel_scale();
        let mut bx = [0.0; 8];
        let mut by = [0.0; 8];
        for k in 0..8 {
            bx[k] = self.q[(idx, k)] * sx;
            by[k] = self.q[(hw + idx, k)] * sy;
        }
        (bx, by)
    }

    /// Max-abs deviation of QᵀQ from the identity; a cheap self-check.
    pub fn orthonormality_error(&self) -> f64 {
        let qtq = self.q.tr_mul(&self.q);
        let mut worst = 0.0f64;
        for i in 0..8 {
            for j in 0..8 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((qtq[(i, j)] - target).abs());
            }
        }
        worst
    }
}

fn invert_upper_triangular(r: &Matrix8) -> Matrix8 {
    let mut inv = Matrix8::zeros();
    for col in 0..8 {
        // Solve R x = e_col by back substitution.
        let mut x = [0.0f64; 8];
        for i in (0..8).rev() {
            let b = if i == col { 1.0 } else { 0.0 };
            let mut acc = b;
            for (j, xj) in x.iter().enumerate().take(8).skip(i + 1) {
                acc -= r[(i, j)] * xj;
            }
            x[i] = acc / r[(i, i)];
        }
        for i in 0..8 {
            inv[(i, col)] = x[i];
        }
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translation_tangent_is_constant() {
        let fields = tangent_fields(8, 6).unwrap();
        for i in 0..6 {
            for j in 0..8 {
                assert_eq!(fields[2].at(i, j), (1.0, 0.0));
                assert_eq!(fields[5].at(i, j), (0.0, 1.0));
            }
        }
    }

    #[test]
    fn perspective_tangent_vanishes_at_grid_center() {
        let fields = tangent_fields(9, 9).unwrap();
        assert_eq!(fields[6].at(4, 4), (0.0, 0.0));
        assert_eq!(fields[7].at(4, 4), (0.0, 0.0));
    }

    #[test]
    fn finite_differences_match_linear_entries_exactly() {
        for eps in [1e-2, 1e-3] {
            let fd = finite_difference_fields(7, 5, eps).unwrap();
            let tf = tangent_fields(7, 5).unwrap();
            for k in 0..6 {
                for (a, b) in fd[k].data().iter().zip(tf[k].data()) {
                    assert!((a - b).abs() < 1e-12, "field {k} eps {eps}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn finite_differences_reject_zero_eps() {
        assert!(matches!(
            finite_difference_fields(8, 8, 0.0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn build_rejects_tiny_grids() {
        assert!(matches!(
            BasisSet::build(2, 8),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn columns_are_orthonormal() {
        for (w, h) in [(8, 8), (63, 48)] {
            let b = BasisSet::build(w, h).unwrap();
            assert!(
                b.orthonormality_error() < 1e-10,
                "{w}x{h}: {}",
                b.orthonormality_error()
            );
        }
    }

    #[test]
    fn r_diagonal_is_positive() {
        let b = BasisSet::build(16, 12).unwrap();
        for i in 0..8 {
            assert!(b.r()[(i, i)] > 0.0);
            for j in 0..i {
                assert_eq!(b.r()[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn qr_reconstructs_the_normalized_tangent_stack() {
        let (w, h) = (12, 10);
        let b = BasisSet::build(w, h).unwrap();
        let fields = tangent_fields(w, h).unwrap();
        let recon = b.q() * b.r();
        for (k, field) in fields.iter().enumerate() {
            for (row, val) in field.data().iter().enumerate() {
                let expect = val / b.norms()[k];
                assert!(
                    (recon[(row, k)] - expect).abs() < 1e-9,
                    "column {k} row {row}"
                );
            }
        }
    }

    #[test]
    fn build_is_bit_deterministic() {
        let a = BasisSet::build(20, 14).unwrap();
        let b = BasisSet::build(20, 14).unwrap();
        assert_eq!(a.q().as_slice(), b.q().as_slice());
        assert_eq!(a.r().as_slice(), b.r().as_slice());
    }

    #[test]
    fn synthesize_zero_weights_is_zero_flow() {
        let b = BasisSet::build(10, 8).unwrap();
        let f = b.synthesize(&BasisWeights::zeros());
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn analyze_zero_flow_is_zero() {
        let b = BasisSet::build(10, 8).unwrap();
        let (w, res) = b.analyze(&FlowField::zeros(10, 8)).unwrap();
        assert_eq!(w, BasisWeights::zeros());
        assert_eq!(res, 0.0);
    }

    #[test]
    fn analyze_inverts_synthesize() {
        let b = BasisSet::build(15, 11).unwrap();
        let alpha = BasisWeights([0.3, -0.1, 0.7, 0.05, -0.4, 0.2, 0.08, -0.06]);
        let (got, res) = b.analyze(&b.synthesize(&alpha)).unwrap();
        assert!(got.max_abs_diff(&alpha) < 1e-10, "{got:?}");
        assert!(res < 1e-10);
    }

    #[test]
    fn unit_weights_reproduce_columns() {
        let b = BasisSet::build(9, 7).unwrap();
        let hw = 9 * 7;
        let (sx, sy) = b.pixel_scale();
        let f = b.synthesize(&BasisWeights::unit(3));
        for idx in 0..hw {
            assert!((f.data()[idx] - b.q()[(idx, 3)] * sx).abs() < 1e-14);
            assert!((f.data()[hw + idx] - b.q()[(hw + idx, 3)] * sy).abs() < 1e-14);
        }
    }

    #[test]
    fn analyze_rejects_mismatched_flows() {
        let b = BasisSet::build(8, 8).unwrap();
        assert!(matches!(
            b.analyze(&FlowField::zeros(8, 9)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn evaluate_at_matches_stored_columns_on_grid() {
        let (w, h) = (11, 9);
        let b = BasisSet::build(w, h).unwrap();
        let hw = w * h;
        let mut pts = Vec::new();
        for i in 0..h {
            for j in 0..w {
                pts.push(Point2::new(centered_x(j, w), centered_y(i, h)));
            }
        }
        let vals = b.evaluate_at(&pts);
        for (idx, val) in vals.iter().enumerate() {
            for k in 0..8 {
                assert!(
                    (val[k][0] - b.q()[(idx, k)]).abs() < 1e-9,
                    "dx basis {k} at {idx}"
                );
                assert!(
                    (val[k][1] - b.q()[(hw + idx, k)]).abs() < 1e-9,
                    "dy basis {k} at {idx}"
                );
            }
        }
    }

    #[test]
    fn translation_bases_are_constant_fields() {
        // On the centered grid the constant tangents are orthogonal to the
        // linear ones, so QR leaves columns 2 and 5 position-independent.
        let b = BasisSet::build(13, 9).unwrap();
        let pts = [
            Point2::new(0.0, 0.0),
            Point2::new(3.2, -1.5),
            Point2::new(-5.9, 3.3),
        ];
        let vals = b.evaluate_at(&pts);
        for k in [2usize, 5usize] {
            for d in 0..2 {
                let v0 = vals[0][k][d];
                assert!(vals.iter().all(|v| (v[k][d] - v0).abs() < 1e-12));
            }
        }
    }
}

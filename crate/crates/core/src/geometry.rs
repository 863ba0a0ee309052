//! Homography algebra, DLT estimation, homography/flow conversion, and
//! backward warping.
//!
//! Coordinate convention: pixel centers with the origin at the image center,
//! `x = j - (W-1)/2` and `y = i - (H-1)/2` for column `j`, row `i`. The
//! symmetric grid keeps DLT and QR systems well conditioned and makes several
//! tangent fields orthogonal by construction.
//!
//! Flow convention: a flow lives on the output grid and is consumed by
//! backward sampling, `out(p) = src(p + flow(p))`. To align a source image to
//! a target under a source-to-target homography `H`, the warp consumes the
//! flow of `H⁻¹`.

use nalgebra::{DMatrix, Matrix3};

use crate::error::{Error, Result};
use crate::exec;

/// Minimum |denominator| for a projective division.
pub const PROJECTION_EPS: f64 = 1e-9;
/// Minimum |det| for an invertible homography.
const DET_EPS: f64 = 1e-12;
/// Relative singular-value gap under which a DLT system is degenerate.
const DLT_GAP_EPS: f64 = 1e-9;

/// A 2-D point in centered pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Euclidean distance to another point.
    pub fn distance(&self, other: &Point2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// An invertible 3x3 projective map, normalized so entry (3,3) is exactly 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    /// Builds from a raw matrix, rescaling so the (3,3) entry becomes 1.
    ///
    /// Scaling the input by any nonzero factor yields the same value. Fails
    /// if the (3,3) entry cannot anchor the normalization or if the
    /// normalized matrix is singular (|det| < 1e-12).
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let scale = m[2][2];
        let max_abs = m
            .iter()
            .flatten()
            .fold(0.0f64, |acc, &v| acc.max(v.abs()));
        if !scale.is_finite() || scale.abs() < 1e-12 * max_abs.max(1e-300) {
            return Err(Error::DegenerateProjection(
                "matrix cannot be normalized to have (3,3) = 1".into(),
            ));
        }
        let mut n = [[0.0; 3]; 3];
        for (i, row) in m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite("homography entries"));
                }
                n[i][j] = v / scale;
            }
        }
        n[2][2] = 1.0;
        let h = Self { m: n };
        if h.det().abs() < DET_EPS {
            return Err(Error::DegenerateProjection(format!(
                "determinant {} below {DET_EPS}",
                h.det()
            )));
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Pure translation by `(tx, ty)`.
    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    /// The normalized 3x3 entries.
    pub fn entries(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Whether the third row is (0, 0, 1), i.e. the map is affine.
    pub fn is_affine(&self) -> bool {
        self.m[2][0] == 0.0 && self.m[2][1] == 0.0
    }

    /// Projective application with homogeneous division.
    pub fn apply(&self, p: Point2) -> Result<Point2> {
        let m = &self.m;
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        if w.abs() <= PROJECTION_EPS {
            return Err(Error::DegenerateProjection(format!(
                "point ({}, {}) maps with |w| = {} <= {PROJECTION_EPS}",
                p.x,
                p.y,
                w.abs()
            )));
        }
        Ok(Point2::new(
            (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w,
            (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w,
        ))
    }

    /// Inverse map; fails if the inverse cannot be renormalized.
    pub fn invert(&self) -> Result<Homography> {
        let m = &self.m;
        let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
        let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
        let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
        let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
        if det.abs() < DET_EPS {
            return Err(Error::DegenerateProjection("singular matrix".into()));
        }
        // Adjugate; from_matrix handles the renormalization.
        let adj = [
            [
                c00,
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                c01,
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                c02,
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        Homography::from_matrix(adj)
    }

    /// Composition applying `self` first, then `next`.
    pub fn compose(&self, next: &Homography) -> Result<Homography> {
        let a = &next.m;
        let b = &self.m;
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        Homography::from_matrix(out)
    }
}

/// Dense displacement grid in pixel units, planar layout: all dx values
/// (row-major) followed by all dy values.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FlowField {
    /// Builds from planar data (`[all dx; all dy]`, row-major).
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 2 * width * height {
            return Err(Error::DimensionMismatch {
                expected: format!("2*{width}*{height} = {}", 2 * width * height),
                got: format!("{}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("flow data"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 2 * width * height],
        }
    }

    /// Constant flow `(dx, dy)` everywhere.
    pub fn constant(width: usize, height: usize, dx: f64, dy: f64) -> Self {
        let hw = width * height;
        let mut data = vec![dx; 2 * hw];
        data[hw..].fill(dy);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Planar backing slice `[all dx; all dy]`.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Displacement at row `i`, column `j`.
    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        let hw = self.width * self.height;
        let idx = i * self.width + j;
        (self.data[idx], self.data[hw + idx])
    }

    pub fn set(&mut self, i: usize, j: usize, dx: f64, dy: f64) {
        let hw = self.width * self.height;
        let idx = i * self.width + j;
        self.data[idx] = dx;
        self.data[hw + idx] = dy;
    }

    /// Largest per-pixel magnitude `max sqrt(dx^2 + dy^2)`.
    pub fn max_magnitude(&self) -> f64 {
        let hw = self.width * self.height;
        let (dxs, dys) = self.data.split_at(hw);
        dxs.iter()
            .zip(dys)
            .fold(0.0f64, |acc, (dx, dy)| acc.max(dx.hypot(*dy)))
    }

    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), 2 * width * height);
        Self {
            width,
            height,
            data,
        }
    }
}

/// Grayscale image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: format!("{width}*{height} = {}", width * height),
                got: format!("{}", pixels.len()),
            });
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("pixels must lie in [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Fills from a function of (row, column); values are clamped to [0, 1].
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut pixels = vec![0.0; width * height];
        for i in 0..height {
            for j in 0..width {
                pixels[i * width + j] = f(i, j).clamp(0.0, 1.0);
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pixels[i * self.width + j]
    }

    pub(crate) fn from_raw(width: usize, height: usize, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), width * height);
        Self {
            width,
            height,
            pixels,
        }
    }
}

/// Per-pixel flag marking samples whose bilinear taps stayed inside the
/// source image.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl ValidityMask {
    pub fn all_valid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![true; width * height],
        }
    }

    pub(crate) fn from_raw(width: usize, height: usize, mask: Vec<bool>) -> Self {
        debug_assert_eq!(mask.len(), width * height);
        Self {
            width,
            height,
            mask,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.mask[i * self.width + j] = v;
    }

    /// Fraction of valid pixels.
    pub fn valid_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&v| v).count() as f64 / self.mask.len() as f64
    }
}

/// Centered x coordinate of column `j` in a `width`-wide grid.
#[inline]
pub fn centered_x(j: usize, width: usize) -> f64 {
    j as f64 - (width as f64 - 1.0) / 2.0
}

/// Centered y coordinate of row `i` in a `height`-tall grid.
#[inline]
pub fn centered_y(i: usize, height: usize) -> f64 {
    i as f64 - (height as f64 - 1.0) / 2.0
}

/// Direct Linear Transform from at least 4 `(src, dst)` correspondences.
///
/// Uses Hartley isotropic normalization (centroids to the origin, mean
/// distance sqrt(2)) on both sides, solves the 2n x 9 system through the
/// eigendecomposition of its 9x9 Gram matrix, then denormalizes. Fails with
/// `DegenerateConfiguration` when the two smallest singular values of the
/// design matrix are separated by less than 1e-9 of the largest one, which
/// catches collinear and repeated-point configurations.
pub fn dlt(correspondences: &[(Point2, Point2)]) -> Result<Homography> {
    let n = correspondences.len();
    if n < 4 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least 4 correspondences, got {n}"
        )));
    }
    let srcs: Vec<Point2> = correspondences.iter().map(|c| c.0).collect();
    let dsts: Vec<Point2> = correspondences.iter().map(|c| c.1).collect();
    let t_src = normalizing_transform(&srcs)?;
    let t_dst = normalizing_transform(&dsts)?;

    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for (i, (src, dst)) in correspondences.iter().enumerate() {
        let s = apply_similarity(&t_src, *src);
        let d = apply_similarity(&t_dst, *dst);
        let r0 = 2 * i;
        a[(r0, 3)] = -s.x;
        a[(r0, 4)] = -s.y;
        a[(r0, 5)] = -1.0;
        a[(r0, 6)] = d.y * s.x;
        a[(r0, 7)] = d.y * s.y;
        a[(r0, 8)] = d.y;
        let r1 = r0 + 1;
        a[(r1, 0)] = s.x;
        a[(r1, 1)] = s.y;
        a[(r1, 2)] = 1.0;
        a[(r1, 6)] = -d.x * s.x;
        a[(r1, 7)] = -d.x * s.y;
        a[(r1, 8)] = -d.x;
    }

    // With exactly 4 points A is 8x9 and a thin SVD would not expose the
    // null vector; pad with a zero row (same singular values, square shape).
    if a.nrows() < 9 {
        let rows = a.nrows();
        a = a.insert_row(rows, 0.0);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("v_t was requested");
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .expect("singular values are finite")
    });
    let sv = |k: usize| svd.singular_values[order[k]];
    if sv(7) - sv(8) <= DLT_GAP_EPS * sv(0) {
        return Err(Error::DegenerateConfiguration(format!(
            "singular-value gap {:.3e} below {DLT_GAP_EPS:.0e} of sigma_max {:.3e}",
            sv(7) - sv(8),
            sv(0)
        )));
    }
    let h_vec = v_t.row(order[8]);
    let h_norm = Matrix3::new(
        h_vec[0], h_vec[1], h_vec[2], h_vec[3], h_vec[4], h_vec[5], h_vec[6], h_vec[7], h_vec[8],
    );

    // Denormalize: H = T_dst⁻¹ · Ĥ · T_src.
    let t_dst_inv = invert_similarity(&t_dst);
    let h = t_dst_inv * h_norm * t_src;
    Homography::from_matrix([
        [h[(0, 0)], h[(0, 1)], h[(0, 2)]],
        [h[(1, 0)], h[(1, 1)], h[(1, 2)]],
        [h[(2, 0)], h[(2, 1)], h[(2, 2)]],
    ])
}

/// Similarity (scale s, translation) as a 3x3 matrix.
fn normalizing_transform(points: &[Point2]) -> Result<Matrix3<f64>> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist < 1e-12 {
        return Err(Error::DegenerateConfiguration(
            "all points coincide".into(),
        ));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn apply_similarity(t: &Matrix3<f64>, p: Point2) -> Point2 {
    Point2::new(
        t[(0, 0)] * p.x + t[(0, 2)],
        t[(1, 1)] * p.y + t[(1, 2)],
    )
}

fn invert_similarity(t: &Matrix3<f64>) -> Matrix3<f64> {
    let s = t[(0, 0)];
    Matrix3::new(
        1.0 / s,
        0.0,
        -t[(0, 2)] / s,
        0.0,
        1.0 / s,
        -t[(1, 2)] / s,
        0.0,
        0.0,
        1.0,
    )
}

/// Dense flow of a homography on a `width` x `height` centered grid:
/// `flow(p) = h(p) - p` in pixel units.
///
/// The projective denominator is linear in (x, y), so it is range-checked on
/// the four grid corners; mixed corner signs mean the horizon crosses the
/// grid and the conversion is rejected.
pub fn homography_to_flow(h: &Homography, width: usize, height: usize) -> Result<FlowField> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidConfig("empty grid".into()));
    }
    let m = h.entries();
    let corner_w = |x: f64, y: f64| m[2][0] * x + m[2][1] * y + 1.0;
    let xs = [centered_x(0, width), centered_x(width - 1, width)];
    let ys = [centered_y(0, height), centered_y(height - 1, height)];
    let ws = [
        corner_w(xs[0], ys[0]),
        corner_w(xs[1], ys[0]),
        corner_w(xs[0], ys[1]),
        corner_w(xs[1], ys[1]),
    ];
    let same_sign = ws.iter().all(|w| *w > 0.0) || ws.iter().all(|w| *w < 0.0);
    if !same_sign || ws.iter().any(|w| w.abs() <= PROJECTION_EPS) {
        return Err(Error::DegenerateProjection(
            "projective horizon crosses the grid".into(),
        ));
    }

    let hw = width * height;
    let mut data = vec![0.0; 2 * hw];
    let (dxs, dys) = data.split_at_mut(hw);
    exec::for_each_row_pair_mut(dxs, width, dys, width, |i, row_dx, row_dy| {
        let y = centered_y(i, height);
        for (j, (dx, dy)) in row_dx.iter_mut().zip(row_dy.iter_mut()).enumerate() {
            let x = centered_x(j, width);
            let w = m[2][0] * x + m[2][1] * y + 1.0;
            *dx = (m[0][0] * x + m[0][1] * y + m[0][2]) / w - x;
            *dy = (m[1][0] * x + m[1][1] * y + m[1][2]) / w - y;
        }
    });
    Ok(FlowField::from_raw(width, height, data))
}

/// Recovers a homography from a flow by DLT on a 9x9 uniform sub-grid of
/// `(p, p + flow(p))` pairs. Exact homography flows round-trip; noisy flows
/// return the algebraic best fit, whose quality the caller judges from the
/// reconstruction residual.
pub fn flow_to_homography(f: &FlowField) -> Result<Homography> {
    const GRID: usize = 9;
    let (w, h) = (f.width(), f.height());
    let mut pairs = Vec::with_capacity(GRID * GRID);
    for gi in 0..GRID {
        for gj in 0..GRID {
            let i = ((gi as f64) * (h as f64 - 1.0) / (GRID as f64 - 1.0)).round() as usize;
            let j = ((gj as f64) * (w as f64 - 1.0) / (GRID as f64 - 1.0)).round() as usize;
            let p = Point2::new(centered_x(j, w), centered_y(i, h));
            let (dx, dy) = f.at(i, j);
            pairs.push((p, Point2::new(p.x + dx, p.y + dy)));
        }
    }
    dlt(&pairs)
}

/// Samples `pixels` bilinearly at fractional array coordinates
/// `(col, row)`. Returns `None` when the sample does not have four in-bounds
/// taps. Coordinates exactly on the far edge are handled by shifting the tap
/// window one pixel in, which keeps integer-coordinate samples exact.
#[inline]
pub(crate) fn bilinear(
    pixels: &[f64],
    width: usize,
    height: usize,
    col: f64,
    row: f64,
) -> Option<f64> {
    if width < 2 || height < 2 {
        return None;
    }
    let max_col = (width - 1) as f64;
    let max_row = (height - 1) as f64;
    if !(col >= 0.0 && col <= max_col && row >= 0.0 && row <= max_row) {
        return None;
    }
    let j0 = (col.floor() as usize).min(width - 2);
    let i0 = (row.floor() as usize).min(height - 2);
    let fx = col - j0 as f64;
    let fy = row - i0 as f64;
    let idx = i0 * width + j0;
    let v00 = pixels[idx];
    let v01 = pixels[idx + 1];
    let v10 = pixels[idx + width];
    let v11 = pixels[idx + width + 1];
    Some(
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11),
    )
}

/// Backward-warps a raw plane by a flow into `out`/`mask` rows. Shared by
/// image and feature-map warping.
pub(crate) fn warp_plane(
    src: &[f64],
    width: usize,
    height: usize,
    flow: &FlowField,
    out: &mut [f64],
    mask: &mut [bool],
) {
    debug_assert_eq!(src.len(), width * height);
    let hw = width * height;
    let (fdx, fdy) = flow.data().split_at(hw);
    exec::for_each_row_pair_mut(out, width, mask, width, |i, row_out, row_mask| {
        let base = i * width;
        for j in 0..width {
            let idx = base + j;
            // The centered sample position (x + dx, y + dy) maps back to
            // array coordinates as (j + dx, i + dy).
            let col = j as f64 + fdx[idx];
            let row = i as f64 + fdy[idx];
            match bilinear(src, width, height, col, row) {
                Some(v) => {
                    row_out[j] = v;
                    row_mask[j] = true;
                }
                None => {
                    row_out[j] = 0.0;
                    row_mask[j] = false;
                }
            }
        }
    });
}

/// Backward bilinear warp: `out(p) = src(p + f(p))`, with a validity mask
/// marking pixels whose four bilinear taps fell inside the source. Invalid
/// pixels are set to zero.
pub fn warp_image(src: &GrayImage, f: &FlowField) -> Result<(GrayImage, ValidityMask)> {
    if src.width() != f.width() || src.height() != f.height() {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", src.width(), src.height()),
            got: format!("{}x{}", f.width(), f.height()),
        });
    }
    let (w, h) = (src.width(), src.height());
    let mut out = vec![0.0; w * h];
    let mut mask = vec![false; w * h];
    warp_plane(src.pixels(), w, h, f, &mut out, &mut mask);
    Ok((
        GrayImage::from_raw(w, h, out),
        ValidityMask::from_raw(w, h, mask),
    ))
}

//! Low-rank representation projection of feature maps and rank/energy
//! diagnostics.
//!
//! The projector treats each channel of a feature map as an HW vector and
//! maps it onto the span of K supplied basis columns:
//! `out_c = V (VᵀV + reg I)⁻¹ Vᵀ m_c`. The Gram normalization is required
//! because the basis columns are not assumed orthogonal. The output has the
//! same shape as the input and channel rank at most K.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::bases::BasisSet;
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::GrayImage;
use crate::rng::CounterRng;

/// Condition-number limit of VᵀV beyond which an unregularized projection is
/// refused.
const GRAM_COND_LIMIT: f64 = 1e12;

/// Multi-channel feature grid, row-major with the channel index innermost:
/// `data[(i*W + j)*C + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 || data.len() != width * height * channels
        {
            return Err(Error::DimensionMismatch {
                expected: format!("{width}*{height}*{channels}"),
                got: format!("{}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature data"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    /// Single-channel map over an image's pixels.
    pub fn from_image(img: &GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            channels: 1,
            data: img.pixels().to_vec(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.width + j) * self.channels + c]
    }

    pub fn set(&mut self, i: usize, j: usize, c: usize, v: f64) {
        self.data[(i * self.width + j) * self.channels + c] = v;
    }

    /// Channel `c` flattened to an HW vector.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = Vec::with_capacity(hw);
        for p in 0..hw {
            out.push(self.data[p * self.channels + c]);
        }
        out
    }

    pub(crate) fn from_raw(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data,
        }
    }
}

/// HW x K column set used by the projection operator.
#[derive(Debug, Clone)]
pub struct ProjectionBasis {
    width: usize,
    height: usize,
    v: DMatrix<f64>,
}

impl ProjectionBasis {
    /// Wraps an HW x K matrix; rejects empty, oversized, or zero columns.
    pub fn new(width: usize, height: usize, v: DMatrix<f64>) -> Result<Self> {
        let hw = width * height;
        if v.nrows() != hw || v.ncols() == 0 || v.ncols() > hw {
            return Err(Error::DimensionMismatch {
                expected: format!("{hw} x K with 1 <= K <= {hw}"),
                got: format!("{} x {}", v.nrows(), v.ncols()),
            });
        }
        for k in 0..v.ncols() {
            let col = v.column(k);
            if !col.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite("projection basis"));
            }
            if col.norm() == 0.0 {
                return Err(Error::SingularBasis(format!("column {k} is zero")));
            }
        }
        Ok(Self { width, height, v })
    }

    /// Each channel of a feature map becomes one basis column.
    pub fn from_feature_map(m: &FeatureMap) -> Result<Self> {
        let hw = m.width() * m.height();
        let mut v = DMatrix::<f64>::zeros(hw, m.channels());
        for c in 0..m.channels() {
            v.column_mut(c).copy_from_slice(&m.channel(c));
        }
        Self::new(m.width(), m.height(), v)
    }

    /// First `k` coordinate directions; projection keeps the first `k`
    /// pixels of each channel and zeroes the rest.
    pub fn canonical(width: usize, height: usize, k: usize) -> Result<Self> {
        let hw = width * height;
        if k == 0 || k > hw {
            return Err(Error::InvalidConfig(format!(
                "canonical basis needs 1 <= k <= {hw}, got {k}"
            )));
        }
        let mut v = DMatrix::<f64>::zeros(hw, k);
        for i in 0..k {
            v[(i, i)] = 1.0;
        }
        Self::new(width, height, v)
    }

    /// QR-orthonormalized Gaussian columns from the seeded counter RNG.
    pub fn random_orthonormal(width: usize, height: usize, k: usize, seed: u64) -> Result<Self> {
        let hw = width * height;
        let mut rng = CounterRng::new(seed);
        let g = DMatrix::<f64>::from_fn(hw, k, |_, _| rng.next_gauss());
        let qr = g.qr();
        Self::new(width, height, qr.q())
    }

    /// Sixteen columns built from the flow-basis component planes (8 dx
    /// planes then 8 dy planes); mirrors channels-as-bases usage.
    pub fn from_basis_flow_components(b: &BasisSet) -> Result<Self> {
        let hw = b.width() * b.height();
        let mut v = DMatrix::<f64>::zeros(hw, 16);
        for k in 0..8 {
            for p in 0..hw {
                v[(p, k)] = b.q()[(p, k)];
                v[(p, 8 + k)] = b.q()[(hw + p, k)];
            }
        }
        Self::new(b.width(), b.height(), v)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn k(&self) -> usize {
        self.v.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Default Tikhonov term: `1e-8 * trace(VᵀV) / K`.
    pub fn default_reg(&self) -> f64 {
        let trace: f64 = (0..self.k()).map(|k| self.v.column(k).norm_squared()).sum();
        1e-8 * trace / self.k() as f64
    }
}

/// Projects every channel of `m_in` onto the span of the basis columns:
/// `out_c = V (VᵀV + reg I)⁻¹ Vᵀ m_c`.
///
/// With `reg = 0` the Gram matrix must be well conditioned (condition number
/// at most 1e12), otherwise `SingularBasis` is returned.
pub fn lrr_project(m_in: &FeatureMap, v: &ProjectionBasis, reg: f64) -> Result<FeatureMap> {
    if m_in.width() != v.width() || m_in.height() != v.height() {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", v.width(), v.height()),
            got: format!("{}x{}", m_in.width(), m_in.height()),
        });
    }
    if !(reg >= 0.0 && reg.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "regularization must be finite and >= 0, got {reg}"
        )));
    }
    let k = v.k();
    let mut gram = v.matrix().tr_mul(v.matrix());
    if reg == 0.0 {
        let eig = SymmetricEigen::new(gram.clone());
        let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
        let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
        if min <= 0.0 || max / min > GRAM_COND_LIMIT {
            return Err(Error::SingularBasis(format!(
                "Gram condition {:.3e} exceeds {GRAM_COND_LIMIT:.0e} with reg = 0",
                if min <= 0.0 { f64::INFINITY } else { max / min }
            )));
        }
    }
    for i in 0..k {
        gram[(i, i)] += reg;
    }
    let chol = Cholesky::new(gram)
        .ok_or_else(|| Error::SingularBasis("Gram matrix is not positive definite".into()))?;

    let channels = m_in.channels();
    let projected: Vec<Vec<f64>> = exec::collect_indexed(channels, |c| {
        let m_c = DVector::<f64>::from_vec(m_in.channel(c));
        let y = v.matrix().tr_mul(&m_c);
        let x = chol.solve(&y);
        (v.matrix() * x).as_slice().to_vec()
    });

    let hw = m_in.width() * m_in.height();
    let mut data = vec![0.0; hw * channels];
    for (c, plane) in projected.iter().enumerate() {
        for p in 0..hw {
            data[p * channels + c] = plane[p];
        }
    }
    Ok(FeatureMap::from_raw(
        m_in.width(),
        m_in.height(),
        channels,
        data,
    ))
}

/// Cumulative squared-singular-value energy profile of the HW x C channel
/// matrix (no mean centering): `profile[k] = sum_{i<=k} s_i^2 / sum s_i^2`.
/// Nondecreasing with final entry exactly 1; an all-zero map yields an empty
/// profile.
pub fn pca_energy(m: &FeatureMap) -> Vec<f64> {
    // s_i^2 are the eigenvalues of the C x C Gram matrix, which is far
    // cheaper than an SVD for HW >> C.
    let c = m.channels();
    let hw = m.width() * m.height();
    let mut a = DMatrix::<f64>::zeros(hw, c);
    for ch in 0..c {
        a.column_mut(ch).copy_from_slice(&m.channel(ch));
    }
    let eig = SymmetricEigen::new(a.tr_mul(&a));
    let mut lambdas: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    lambdas.sort_by(|x, y| y.partial_cmp(x).expect("eigenvalues are finite"));
    let total: f64 = lambdas.iter().sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let mut profile = Vec::with_capacity(c);
    let mut acc = 0.0;
    for l in &lambdas {
        acc += l;
        profile.push((acc / total).min(1.0));
    }
    *profile.last_mut().expect("profile is nonempty") = 1.0;
    profile
}

/// Fractional number of principal components at which the piecewise-linear
/// interpolant of the energy profile (with E(0) = 0) first reaches
/// `threshold`.
///
/// `profile` must be nondecreasing and end at 1; `threshold` must lie in
/// (0, 1]. Both are debug-asserted.
pub fn npc(profile: &[f64], threshold: f64) -> f64 {
    debug_assert!(threshold > 0.0 && threshold <= 1.0);
    debug_assert!(!profile.is_empty());
    debug_assert!(profile.windows(2).all(|w| w[0] <= w[1]));
    let mut prev = 0.0;
    for (k, &e) in profile.iter().enumerate() {
        if e >= threshold {
            let rise = e - prev;
            debug_assert!(rise > 0.0, "first crossing cannot be on a flat segment");
            return k as f64 + (threshold - prev) / rise;
        }
        prev = e;
    }
    profile.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from_channels(width: usize, height: usize, chans: &[Vec<f64>]) -> FeatureMap {
        let c = chans.len();
        let hw = width * height;
        let mut data = vec![0.0; hw * c];
        for (ci, chan) in chans.iter().enumerate() {
            for p in 0..hw {
                data[p * c + ci] = chan[p];
            }
        }
        FeatureMap::new(width, height, c, data).unwrap()
    }

    #[test]
    fn canonical_projection_keeps_leading_coordinates() {
        let v = ProjectionBasis::canonical(2, 2, 2).unwrap();
        let m = map_from_channels(2, 2, &[vec![1.0, 2.0, 3.0, 4.0]]);
        let out = lrr_project(&m, &v, 0.0).unwrap();
        assert_eq!(out.channel(0), vec![1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn all_ones_basis_projects_to_the_mean() {
        let v = ProjectionBasis::new(2, 2, DMatrix::from_element(4, 1, 1.0)).unwrap();
        let m = map_from_channels(2, 2, &[vec![1.0, 2.0, 3.0, 4.0]]);
        let out = lrr_project(&m, &v, 0.0).unwrap();
        for p in out.channel(0) {
            assert!((p - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_rejects_duplicate_columns_without_reg() {
        let mut v = DMatrix::<f64>::zeros(4, 2);
        v.column_mut(0).copy_from_slice(&[1.0, 1.0, 0.0, 0.0]);
        v.column_mut(1).copy_from_slice(&[1.0, 1.0, 0.0, 0.0]);
        let basis = ProjectionBasis::new(2, 2, v).unwrap();
        let m = map_from_channels(2, 2, &[vec![1.0, 0.0, 0.0, 0.0]]);
        assert!(matches!(
            lrr_project(&m, &basis, 0.0),
            Err(Error::SingularBasis(_))
        ));
        // A positive regularizer makes the same system solvable.
        assert!(lrr_project(&m, &basis, 1e-6).is_ok());
    }

    #[test]
    fn projection_rejects_mismatched_shapes_and_negative_reg() {
        let v = ProjectionBasis::canonical(2, 2, 1).unwrap();
        let m = map_from_channels(2, 3, &[vec![0.0; 6]]);
        assert!(matches!(
            lrr_project(&m, &v, 0.0),
            Err(Error::DimensionMismatch { .. })
        ));
        let m2 = map_from_channels(2, 2, &[vec![0.0; 4]]);
        assert!(matches!(
            lrr_project(&m2, &v, -1.0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn rank_one_map_has_flat_energy_profile() {
        // Outer product: every channel is a multiple of the same vector.
        let base = [1.0, -2.0, 0.5, 3.0];
        let chans: Vec<Vec<f64>> = [1.0, 0.2, -0.7]
            .iter()
            .map(|&s| base.iter().map(|v| v * s).collect())
            .collect();
        let m = map_from_channels(2, 2, &chans);
        let profile = pca_energy(&m);
        assert_eq!(profile.len(), 3);
        for e in profile {
            assert!((e - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_channels_split_energy_by_squared_norm() {
        let chans = vec![vec![2.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
        let m = map_from_channels(2, 2, &chans);
        let profile = pca_energy(&m);
        assert!((profile[0] - 0.8).abs() < 1e-12);
        assert_eq!(profile[1], 1.0);
    }

    #[test]
    fn zero_map_yields_empty_profile() {
        assert!(pca_energy(&FeatureMap::zeros(3, 3, 4)).is_empty());
    }

    #[test]
    fn npc_interpolation_fixtures() {
        assert!((npc(&[0.8, 1.0], 0.6) - 0.75).abs() < 1e-12);
        assert!((npc(&[0.5, 1.0], 0.5) - 1.0).abs() < 1e-12);
        assert!((npc(&[0.5, 1.0], 0.75) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn basis_constructors_validate_inputs() {
        assert!(ProjectionBasis::canonical(4, 4, 0).is_err());
        let zero_col = DMatrix::<f64>::zeros(4, 1);
        assert!(matches!(
            ProjectionBasis::new(2, 2, zero_col),
            Err(Error::SingularBasis(_))
        ));
        let v = ProjectionBasis::random_orthonormal(4, 4, 5, 99).unwrap();
        let gram = v.matrix().tr_mul(v.matrix());
        for i in 0..5 {
            for j in 0..5 {
                let t = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - t).abs() < 1e-12);
            }
        }
    }
}

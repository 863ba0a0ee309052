//! Basis-weight estimation: closed-form least squares on sparse
//! correspondences, IRLS-robust fitting on dense flows, and direct
//! photometric alignment of an image pair by coarse-to-fine Gauss-Newton.
//!
//! Because the bases use normalized coordinates, the same weight vector
//! describes the same homography at every pyramid level, so weights transfer
//! across levels unchanged.

use nalgebra::{Cholesky, SMatrix, SVector, SymmetricEigen};

use crate::bases::{BasisSet, BasisWeights};
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{
    self, centered_x, centered_y, flow_to_homography, FlowField, GrayImage, Homography, Point2,
};

type Matrix8 = SMatrix<f64, 8, 8>;
type Vector8 = SVector<f64, 8>;

/// Condition-number limit for the 8x8 normal matrix.
const NORMAL_COND_LIMIT: f64 = 1e12;
/// Mean-squared-gradient threshold below which an image carries no usable
/// texture for photometric alignment.
const TEXTURE_EPS: f64 = 1e-6;

/// One sparse observation of the flow: `dst - src` at `src`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub src: Point2,
    pub dst: Point2,
    /// Nonnegative confidence; 1 by default.
    pub weight: f64,
}

impl Correspondence {
    pub fn new(src: Point2, dst: Point2) -> Self {
        Self {
            src,
            dst,
            weight: 1.0,
        }
    }

    pub fn weighted(src: Point2, dst: Point2, weight: f64) -> Self {
        Self { src, dst, weight }
    }
}

/// Robust loss selector for IRLS.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RobustLoss {
    Huber,
    Welsch,
}

impl RobustLoss {
    /// IRLS weight for a residual norm `r` at scale `delta`.
    fn weight(&self, r: f64, delta: f64) -> f64 {
        match self {
            Self::Huber => {
                if r <= delta {
                    1.0
                } else {
                    delta / r
                }
            }
            Self::Welsch => (-(r / delta) * (r / delta)).exp(),
        }
    }
}

/// IRLS configuration.
#[derive(Debug, Clone, Copy)]
pub struct RobustConfig {
    pub loss: RobustLoss,
    /// Scale in pixels.
    pub scale: f64,
    pub max_iters: usize,
    /// Convergence threshold on the max-abs change of the robust weights.
    pub tol: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            loss: RobustLoss::Huber,
            scale: 1.0,
            max_iters: 50,
            tol: 1e-6,
        }
    }
}

impl RobustConfig {
    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "robust scale must be positive, got {}",
                self.scale
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("tol must be positive".into()));
        }
        Ok(())
    }
}

/// Observations accepted by [`fit_robust`].
#[derive(Debug, Clone, Copy)]
pub enum Observations<'a> {
    /// Every grid pixel of a dense flow.
    Flow(&'a FlowField),
    /// Sparse correspondences.
    Sparse(&'a [Correspondence]),
}

/// Result of a robust fit.
#[derive(Debug, Clone)]
pub struct RobustFit {
    pub weights: BasisWeights,
    /// Final robust weight per observation, in [0, 1]; for flow observations
    /// the order is row-major over pixels.
    pub robust_weights: Vec<f64>,
    /// Weighted per-equation RMS residual in pixels.
    pub rms: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Internal dense observation: pixel-unit basis rows and the observed
/// displacement.
struct Obs {
    bx: [f64; 8],
    by: [f64; 8],
    dx: f64,
    dy: f64,
    base_weight: f64,
}

fn gather_observations(b: &BasisSet, obs: Observations<'_>) -> Result<Vec<Obs>> {
    match obs {
        Observations::Flow(f) => {
            if f.width() != b.width() || f.height() != b.height() {
                return Err(Error::DimensionMismatch {
                    expected: format!("{}x{}", b.width(), b.height()),
                    got: format!("{}x{}", f.width(), f.height()),
                });
            }
            let (w, h) = (f.width(), f.height());
            let mut out = Vec::with_capacity(w * h);
            for i in 0..h {
                for j in 0..w {
                    let (bx, by) = b.pixel_basis_rows(i, j);
                    let (dx, dy) = f.at(i, j);
                    out.push(Obs {
                        bx,
                        by,
                        dx,
                        dy,
                        base_weight: 1.0,
                    });
                }
            }
            Ok(out)
        }
        Observations::Sparse(corrs) => {
            let points: Vec<Point2> = corrs.iter().map(|c| c.src).collect();
            let rows = b.evaluate_at(&points);
            let (sx, sy) = b.pixel_scale();
            Ok(corrs
                .iter()
                .zip(rows)
                .map(|(c, basis)| {
                    let mut bx = [0.0; 8];
                    let mut by = [0.0; 8];
                    for k in 0..8 {
                        bx[k] = basis[k][0] * sx;
                        by[k] = basis[k][1] * sy;
                    }
                    Obs {
                        bx,
                        by,
                        dx: c.dst.x - c.src.x,
                        dy: c.dst.y - c.src.y,
                        base_weight: c.weight.max(0.0),
                    }
                })
                .collect())
        }
    }
}

/// Solves the weighted normal equations over the observations; weights are
/// `base_weight * extra[k]`.
fn solve_weighted(obs: &[Obs], extra: &[f64]) -> Result<BasisWeights> {
    let mut a = Matrix8::zeros();
    let mut g = Vector8::zeros();
    for (o, &wk) in obs.iter().zip(extra) {
        let w = o.base_weight * wk;
        if w == 0.0 {
            continue;
        }
        for r in 0..8 {
            let br_x = o.bx[r];
            let br_y = o.by[r];
            for c in r..8 {
                a[(r, c)] += w * (br_x * o.bx[c] + br_y * o.by[c]);
            }
            g[r] += w * (br_x * o.dx + br_y * o.dy);
        }
    }
    for r in 0..8 {
        for c in 0..r {
            a[(r, c)] = a[(c, r)];
        }
    }
    let eig = SymmetricEigen::new(a);
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 || max / min > NORMAL_COND_LIMIT {
        return Err(Error::UnderdeterminedSystem(format!(
            "normal matrix condition {:.3e} exceeds {NORMAL_COND_LIMIT:.0e}",
            if min <= 0.0 { f64::INFINITY } else { max / min }
        )));
    }
    let chol = Cholesky::new(a)
        .ok_or_else(|| Error::UnderdeterminedSystem("normal matrix not SPD".into()))?;
    let alpha = chol.solve(&g);
    let mut w = [0.0; 8];
    w.copy_from_slice(alpha.as_slice());
    Ok(BasisWeights(w))
}

fn residual_norms(obs: &[Obs], alpha: &BasisWeights) -> Vec<f64> {
    let a = alpha.as_slice();
    obs.iter()
        .map(|o| {
            let mut rx = -o.dx;
            let mut ry = -o.dy;
            for k in 0..8 {
                rx += o.bx[k] * a[k];
                ry += o.by[k] * a[k];
            }
            rx.hypot(ry)
        })
        .collect()
}

fn weighted_rms(obs: &[Obs], extra: &[f64], alpha: &BasisWeights) -> f64 {
    let norms = residual_norms(obs, alpha);
    let mut num = 0.0;
    let mut den = 0.0;
    for ((o, &wk), r) in obs.iter().zip(extra).zip(norms) {
        let w = o.base_weight * wk;
        num += w * r * r;
        den += w;
    }
    if den <= 0.0 {
        0.0
    } else {
        // Per scalar equation: each observation contributes two equations.
        (num / (2.0 * den)).sqrt()
    }
}

/// Weighted least-squares fit of the 8 weights to sparse correspondences:
/// minimizes `sum_i w_i |B(p_i) alpha - (dst_i - src_i)|^2` in pixel units.
/// Returns the weights and the per-equation RMS residual in pixels.
pub fn fit_sparse(b: &BasisSet, corrs: &[Correspondence]) -> Result<(BasisWeights, f64)> {
    if corrs.len() < 4 {
        return Err(Error::UnderdeterminedSystem(format!(
            "need at least 4 correspondences, got {}",
            corrs.len()
        )));
    }
    let obs = gather_observations(b, Observations::Sparse(corrs))?;
    let ones = vec![1.0; obs.len()];
    let alpha = solve_weighted(&obs, &ones)?;
    let rms = weighted_rms(&obs, &ones, &alpha);
    Ok((alpha, rms))
}

/// IRLS fit: alternates a weighted least-squares solve with a robust
/// reweighting of the residual norms until the weights stabilize. The
/// returned weight map is the analogue of a learned outlier mask: inliers
/// sit near 1, outliers decay toward 0.
///
/// The first iterate (all robust weights 1) equals [`fit_sparse`]; if the
/// weights never stabilize within `max_iters` the best iterate is returned
/// with `converged = false`.
pub fn fit_robust(
    b: &BasisSet,
    observations: Observations<'_>,
    cfg: &RobustConfig,
) -> Result<RobustFit> {
    cfg.validate()?;
    let obs = gather_observations(b, observations)?;
    if obs.len() < 4 {
        return Err(Error::UnderdeterminedSystem(format!(
            "need at least 4 observations, got {}",
            obs.len()
        )));
    }
    let mut robust = vec![1.0; obs.len()];
    let mut alpha = BasisWeights::zeros();
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=cfg.max_iters {
        iterations = iter;
        alpha = solve_weighted(&obs, &robust)?;
        let norms = residual_norms(&obs, &alpha);
        let mut change = 0.0f64;
        for (wk, r) in robust.iter_mut().zip(norms) {
            let next = cfg.loss.weight(r, cfg.scale);
            change = change.max((next - *wk).abs());
            *wk = next;
        }
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    let rms = weighted_rms(&obs, &robust, &alpha);
    Ok(RobustFit {
        weights: alpha,
        robust_weights: robust,
        rms,
        converged,
        iterations,
    })
}

/// Photometric objective flavor for [`align_direct`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Photometric {
    /// Masked mean squared difference.
    #[default]
    Ssd,
    /// Masked mean squared difference of zero-mean, unit-variance images
    /// (normalization recomputed per evaluation over the valid set), which
    /// cancels global gain/bias differences between the two inputs.
    ZeroMeanNormalized,
}

/// Configuration of the coarse-to-fine Gauss-Newton alignment.
#[derive(Debug, Clone, Copy)]
pub struct AlignConfig {
    /// Number of pyramid levels (level 0 is full resolution); must satisfy
    /// `levels <= floor(log2(min(W, H))) - 2`.
    pub pyramid_levels: usize,
    /// Gauss-Newton iterations per level.
    pub gn_iters: usize,
    /// Stop a level when the accepted step norm falls below this.
    pub step_tol: f64,
    pub initial: BasisWeights,
    pub photometric: Photometric,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 4,
            gn_iters: 30,
            step_tol: 1e-8,
            initial: BasisWeights::zeros(),
            photometric: Photometric::Ssd,
        }
    }
}

/// Result of a direct alignment.
#[derive(Debug, Clone)]
pub struct AlignResult {
    /// Weights of the warp flow that maps `i_a` onto `i_b` under backward
    /// sampling (the flow of the inverse of `homography`).
    pub weights: BasisWeights,
    /// Source-to-target point map: `apply(homography, p_a) ≈ p_b`.
    pub homography: Homography,
    /// Final masked photometric objective at full resolution.
    pub photometric_error: f64,
    pub converged: bool,
    pub valid_fraction: f64,
}

/// Precomputed per-level basis sets for repeated alignments at one size.
pub struct Aligner {
    levels: Vec<BasisSet>,
    cfg: AlignConfig,
}

fn downsample_box2(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width() / 2, img.height() / 2);
    let mut out = vec![0.0; w * h];
    exec::for_each_row_mut(&mut out, w, |i, row| {
        for (j, v) in row.iter_mut().enumerate() {
            let a = img.get(2 * i, 2 * j);
            let b = img.get(2 * i, 2 * j + 1);
            let c = img.get(2 * i + 1, 2 * j);
            let d = img.get(2 * i + 1, 2 * j + 1);
            *v = (a + b + c + d) / 4.0;
        }
    });
    GrayImage::from_fn(w, h, |i, j| out[i * w + j])
}

fn gradient_planes(img: &GrayImage) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width(), img.height());
    let px = img.pixels();
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    exec::for_each_row_pair_mut(&mut gx, w, &mut gy, w, |i, row_gx, row_gy| {
        let i_up = i.saturating_sub(1);
        let i_dn = (i + 1).min(h - 1);
        for j in 0..w {
            let j_lf = j.saturating_sub(1);
            let j_rt = (j + 1).min(w - 1);
            row_gx[j] = (px[i * w + j_rt] - px[i * w + j_lf]) / 2.0;
            row_gy[j] = (px[i_dn * w + j] - px[i_up * w + j]) / 2.0;
        }
    });
    (gx, gy)
}

fn mean_squared_gradient(img: &GrayImage) -> f64 {
    let (gx, gy) = gradient_planes(img);
    let n = gx.len() as f64;
    let sum = exec::sum_rows(img.height(), |i| {
        let w = img.width();
        let mut acc = 0.0;
        for j in 0..w {
            acc += gx[i * w + j] * gx[i * w + j] + gy[i * w + j] * gy[i * w + j];
        }
        acc
    });
    sum / n
}

/// Masked objective value for the warp of `a` by `flow` against `b`.
/// Returns `(objective, valid_fraction)`.
fn objective(
    a: &GrayImage,
    b: &GrayImage,
    flow: &FlowField,
    kind: Photometric,
) -> Result<(f64, f64)> {
    let (warped, mask) = geometry::warp_image(a, flow)?;
    let (w, h) = (b.width(), b.height());
    let stats = exec::collect_indexed(h, |i| {
        let mut count = 0usize;
        let mut sum_w = 0.0;
        let mut sum_b = 0.0;
        let mut sum_w2 = 0.0;
        let mut sum_b2 = 0.0;
        let mut sum_sq = 0.0;
        for j in 0..w {
            if mask.get(i, j) {
                let x = warped.get(i, j);
                let y = b.get(i, j);
                count += 1;
                sum_w += x;
                sum_b += y;
                sum_w2 += x * x;
                sum_b2 += y * y;
                let d = x - y;
                sum_sq += d * d;
            }
        }
        (count, sum_w, sum_b, sum_w2, sum_b2, sum_sq)
    });
    let mut count = 0usize;
    let (mut sum_w, mut sum_b, mut sum_w2, mut sum_b2, mut sum_sq) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (c, sw, sb, sw2, sb2, ssq) in stats {
        count += c;
        sum_w += sw;
        sum_b += sb;
        sum_w2 += sw2;
        sum_b2 += sb2;
        sum_sq += ssq;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let n = count as f64;
    let fraction = n / (w * h) as f64;
    let value = match kind {
        Photometric::Ssd => sum_sq / n,
        Photometric::ZeroMeanNormalized => {
            let mu_w = sum_w / n;
            let mu_b = sum_b / n;
            let var_w = (sum_w2 / n - mu_w * mu_w).max(1e-12);
            let var_b = (sum_b2 / n - mu_b * mu_b).max(1e-12);
            let (sd_w, sd_b) = (var_w.sqrt(), var_b.sqrt());
            // mean of ((x-mu_w)/sd_w - (y-mu_b)/sd_b)^2 expanded from the
            // accumulated moments.
            let cross = {
                // E[(x-mu_w)(y-mu_b)] needs sum of x*y; recompute via the
                // squared-difference identity: sum_sq = sum_w2 - 2 sum_xy + sum_b2.
                let sum_xy = (sum_w2 + sum_b2 - sum_sq) / 2.0;
                sum_xy / n - mu_w * mu_b
            };
            (var_w / (sd_w * sd_w)) + (var_b / (sd_b * sd_b)) - 2.0 * cross / (sd_w * sd_b)
        }
    };
    Ok((value, fraction))
}

/// Per-level Gauss-Newton state.
struct LevelData {
    a: GrayImage,
    b: GrayImage,
    gx: Vec<f64>,
    gy: Vec<f64>,
}

impl Aligner {
    /// Builds the per-level basis sets for images of `width` x `height`.
    pub fn new(width: usize, height: usize, cfg: AlignConfig) -> Result<Self> {
        let min_dim = width.min(height);
        if min_dim < 8 {
            return Err(Error::InvalidConfig(format!(
                "images must be at least 8x8, got {width}x{height}"
            )));
        }
        let max_levels = ((min_dim as f64).log2().floor() as usize).saturating_sub(2);
        if cfg.pyramid_levels == 0 || cfg.pyramid_levels > max_levels {
            return Err(Error::InvalidConfig(format!(
                "pyramid_levels must lie in 1..={max_levels} for {width}x{height}, got {}",
                cfg.pyramid_levels
            )));
        }
        if cfg.gn_iters == 0 {
            return Err(Error::InvalidConfig("gn_iters must be positive".into()));
        }
        if !(cfg.step_tol > 0.0) {
            return Err(Error::InvalidConfig("step_tol must be positive".into()));
        }
        let mut levels = Vec::with_capacity(cfg.pyramid_levels);
        let (mut w, mut h) = (width, height);
        for _ in 0..cfg.pyramid_levels {
            levels.push(BasisSet::build(w, h)?);
            w /= 2;
            h /= 2;
        }
        Ok(Self { levels, cfg })
    }

    /// Wraps an existing full-resolution basis set, building only the
    /// coarser levels.
    pub fn from_full_basis(full: BasisSet, cfg: AlignConfig) -> Result<Self> {
        let mut aligner = Self::new(full.width(), full.height(), cfg)?;
        aligner.levels[0] = full;
        Ok(aligner)
    }

    pub fn config(&self) -> &AlignConfig {
        &self.cfg
    }

    pub fn full_basis(&self) -> &BasisSet {
        &self.levels[0]
    }

    /// Aligns `i_a` to `i_b`: estimates the warp flow (in basis weights)
    /// that backward-samples `i_a` into registration with `i_b`, then
    /// reports the source-to-target homography.
    pub fn align(&self, i_a: &GrayImage, i_b: &GrayImage) -> Result<AlignResult> {
        let b0 = &self.levels[0];
        if i_a.width() != b0.width()
            || i_a.height() != b0.height()
            || i_b.width() != b0.width()
            || i_b.height() != b0.height()
        {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", b0.width(), b0.height()),
                got: format!(
                    "{}x{} / {}x{}",
                    i_a.width(),
                    i_a.height(),
                    i_b.width(),
                    i_b.height()
                ),
            });
        }
        for (name, img) in [("first", i_a), ("second", i_b)] {
            let energy = mean_squared_gradient(img);
            if energy < TEXTURE_EPS {
                return Err(Error::NoTexture(format!(
                    "{name} image mean squared gradient {energy:.3e} below {TEXTURE_EPS:.0e}"
                )));
            }
        }

        // Image pyramids, finest first.
        let mut pyr: Vec<LevelData> = Vec::with_capacity(self.levels.len());
        let (mut pa, mut pb) = (i_a.clone(), i_b.clone());
        for level in 0..self.levels.len() {
            if level > 0 {
                pa = downsample_box2(&pa);
                pb = downsample_box2(&pb);
            }
            let (gx, gy) = gradient_planes(&pa);
            pyr.push(LevelData {
                a: pa.clone(),
                b: pb.clone(),
                gx,
                gy,
            });
        }

        let initial_full = objective(
            &pyr[0].a,
            &pyr[0].b,
            &self.levels[0].synthesize(&self.cfg.initial),
            self.cfg.photometric,
        )?;

        let mut alpha = self.cfg.initial;
        let mut finest_converged = false;
        for level in (0..self.levels.len()).rev() {
            // Weights are resolution independent, so the coarse result seeds
            // the next level unchanged. At full resolution, fall back to the
            // initial weights if the pyramid made things worse.
            if level == 0 {
                let from_pyramid = objective(
                    &pyr[0].a,
                    &pyr[0].b,
                    &self.levels[0].synthesize(&alpha),
                    self.cfg.photometric,
                );
                match from_pyramid {
                    Ok((obj, _)) if obj <= initial_full.0 => {}
                    _ => alpha = self.cfg.initial,
                }
            }
            let (next, converged) = self.optimize_level(&self.levels[level], &pyr[level], alpha)?;
            alpha = next;
            if level == 0 {
                finest_converged = converged;
            }
        }

        let flow = self.levels[0].synthesize(&alpha);
        let (err, fraction) = objective(&pyr[0].a, &pyr[0].b, &flow, self.cfg.photometric)?;
        // The optimized flow backward-samples a into b, i.e. it is the flow
        // of the target-to-source map; invert to report source-to-target.
        let homography = flow_to_homography(&flow)?.invert()?;
        Ok(AlignResult {
            weights: alpha,
            homography,
            photometric_error: err,
            converged: finest_converged,
            valid_fraction: fraction,
        })
    }

    /// Gauss-Newton loop at one level. Returns the refined weights and
    /// whether the loop stopped by step tolerance (as opposed to running out
    /// of iterations or failing to improve).
    fn optimize_level(
        &self,
        basis: &BasisSet,
        data: &LevelData,
        mut alpha: BasisWeights,
    ) -> Result<(BasisWeights, bool)> {
        let kind = self.cfg.photometric;
        let mut current = match objective(&data.a, &data.b, &basis.synthesize(&alpha), kind) {
            Ok((obj, _)) => obj,
            // A fully invalid mask at a coarse level: keep the weights.
            Err(Error::EmptyMask) => return Ok((alpha, false)),
            Err(e) => return Err(e),
        };
        let mut converged = false;
        for _ in 0..self.cfg.gn_iters {
            let flow = basis.synthesize(&alpha);
            let Some((a_mat, g_vec)) = self.normal_equations(basis, data, &flow) else {
                break;
            };
            let Some(chol) = Cholesky::new(a_mat) else {
                break;
            };
            let delta = chol.solve(&g_vec);
            let step_norm_full = delta.norm();
            if step_norm_full == 0.0 {
                converged = true;
                break;
            }
            // Damped update: halve until the objective decreases.
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..=8 {
                let mut cand = alpha;
                for k in 0..8 {
                    cand.0[k] -= scale * delta[k];
                }
                match objective(&data.a, &data.b, &basis.synthesize(&cand), kind) {
                    Ok((obj, _)) if obj < current => {
                        alpha = cand;
                        current = obj;
                        accepted = true;
                        break;
                    }
                    _ => scale *= 0.5,
                }
            }
            if !accepted {
                break;
            }
            if scale * step_norm_full < self.cfg.step_tol {
                converged = true;
                break;
            }
        }
        Ok((alpha, converged))
    }

    /// Accumulates the masked Gauss-Newton normal equations
    /// `(JᵀJ, Jᵀr)` for the SSD objective linearized at `flow`:
    /// `J_p[k] = grad_a(p + flow(p)) · basis_k(p)` per valid pixel.
    /// Row partials are folded in row order. Returns `None` on an empty
    /// mask.
    fn normal_equations(
        &self,
        basis: &BasisSet,
        data: &LevelData,
        flow: &FlowField,
    ) -> Option<(Matrix8, Vector8)> {
        let (w, h) = (data.a.width(), data.a.height());
        let hw = w * h;
        let (fdx, fdy) = flow.data().split_at(hw);
        let (sx, sy) = basis.pixel_scale();
        let q = basis.q();
        let a_px = data.a.pixels();
        let b_px = data.b.pixels();
        let kind = self.cfg.photometric;

        // For the normalized variant the objective is evaluated on
        // standardized images; the Jacobian treats the normalization as
        // constant, which leaves the step direction unchanged up to a
        // positive factor that damping absorbs.
        let norm_stats = if kind == Photometric::ZeroMeanNormalized {
            objective_stats(a_px, b_px, w, h, fdx, fdy)
        } else {
            None
        };

        struct Partial {
            jtj: [f64; 64],
            jtr: [f64; 8],
            count: usize,
        }
        let partials = exec::collect_indexed(h, |i| {
            let mut p = Partial {
                jtj: [0.0; 64],
                jtr: [0.0; 8],
                count: 0,
            };
            for j in 0..w {
                let idx = i * w + j;
                let col = j as f64 + fdx[idx];
                let row = i as f64 + fdy[idx];
                let (Some(aw), Some(gxw), Some(gyw)) = (
                    geometry::bilinear(a_px, w, h, col, row),
                    geometry::bilinear(&data.gx, w, h, col, row),
                    geometry::bilinear(&data.gy, w, h, col, row),
                ) else {
                    continue;
                };
                let (mut x, mut y) = (aw, b_px[idx]);
                let (mut gx, mut gy) = (gxw, gyw);
                if let Some((mu_w, sd_w, mu_b, sd_b)) = norm_stats {
                    x = (x - mu_w) / sd_w;
                    y = (y - mu_b) / sd_b;
                    gx /= sd_w;
                    gy /= sd_w;
                }
                let r = x - y;
                let mut jrow = [0.0; 8];
                for (k, jk) in jrow.iter_mut().enumerate() {
                    *jk = gx * q[(idx, k)] * sx + gy * q[(hw + idx, k)] * sy;
                }
                for rr in 0..8 {
                    for cc in rr..8 {
                        p.jtj[rr * 8 + cc] += jrow[rr] * jrow[cc];
                    }
                    p.jtr[rr] += jrow[rr] * r;
                }
                p.count += 1;
            }
            p
        });

        let mut jtj = [0.0; 64];
        let mut jtr = [0.0; 8];
        let mut count = 0usize;
        for p in partials {
            for (dst, src) in jtj.iter_mut().zip(p.jtj) {
                *dst += src;
            }
            for (dst, src) in jtr.iter_mut().zip(p.jtr) {
                *dst += src;
            }
            count += p.count;
        }
        if count == 0 {
            return None;
        }
        let mut a_mat = Matrix8::zeros();
        let mut g_vec = Vector8::zeros();
        for r in 0..8 {
            for c in r..8 {
                a_mat[(r, c)] = jtj[r * 8 + c];
                a_mat[(c, r)] = jtj[r * 8 + c];
            }
            g_vec[r] = jtr[r];
        }
        Some((a_mat, g_vec))
    }
}

/// Masked first/second moments of the warped image and target; used by the
/// zero-mean-normalized objective's Jacobian.
fn objective_stats(
    a_px: &[f64],
    b_px: &[f64],
    w: usize,
    h: usize,
    fdx: &[f64],
    fdy: &[f64],
) -> Option<(f64, f64, f64, f64)> {
    let mut count = 0usize;
    let (mut sum_w, mut sum_b, mut sum_w2, mut sum_b2) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let idx = i * w + j;
            if let Some(x) = geometry::bilinear(a_px, w, h, j as f64 + fdx[idx], i as f64 + fdy[idx])
            {
                let y = b_px[idx];
                count += 1;
                sum_w += x;
                sum_b += y;
                sum_w2 += x * x;
                sum_b2 += y * y;
            }
        }
    }
    if count == 0 {
        return None;
    }
    let n = count as f64;
    let mu_w = sum_w / n;
    let mu_b = sum_b / n;
    let sd_w = (sum_w2 / n - mu_w * mu_w).max(1e-12).sqrt();
    let sd_b = (sum_b2 / n - mu_b * mu_b).max(1e-12).sqrt();
    Some((mu_w, sd_w, mu_b, sd_b))
}

/// Coarse-to-fine Gauss-Newton photometric alignment of `i_a` onto `i_b`
/// over the basis weights. `b` must match the image size; coarser levels are
/// rebuilt internally (use [`Aligner`] to amortize that across calls).
pub fn align_direct(
    i_a: &GrayImage,
    i_b: &GrayImage,
    b: &BasisSet,
    cfg: &AlignConfig,
) -> Result<AlignResult> {
    let aligner = Aligner::from_full_basis(b.clone(), *cfg)?;
    aligner.align(i_a, i_b)
}

/// Verifies the Gauss-Newton gradient of the masked SSD objective against
/// central finite differences (step 1e-4 per weight). Returns
/// `max_k |g_analytic[k] - g_fd[k]|` relative to the larger of the two
/// gradient max-norms; zero when both vanish.
///
/// The comparison uses a frozen interior mask (valid pixels whose taps stay
/// at least one pixel inside the image at `alpha`), so both sides
/// differentiate the same smooth function.
pub fn gn_gradient_check(
    i_a: &GrayImage,
    i_b: &GrayImage,
    b: &BasisSet,
    alpha: &BasisWeights,
) -> Result<f64> {
    if i_a.width() != b.width() || i_a.height() != b.height() {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", b.width(), b.height()),
            got: format!("{}x{}", i_a.width(), i_a.height()),
        });
    }
    let (w, h) = (i_a.width(), i_a.height());
    let hw = w * h;
    let flow0 = b.synthesize(alpha);
    let (fdx0, fdy0) = flow0.data().split_at(hw);

    // Freeze a 1px-interior mask at alpha.
    let mut frozen = vec![false; hw];
    for i in 0..h {
        for j in 0..w {
            let idx = i * w + j;
            let col = j as f64 + fdx0[idx];
            let row = i as f64 + fdy0[idx];
            frozen[idx] = col >= 1.0
                && col <= (w as f64 - 2.0)
                && row >= 1.0
                && row <= (h as f64 - 2.0);
        }
    }
    let n_valid = frozen.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(Error::EmptyMask);
    }

    let a_px = i_a.pixels();
    let b_px = i_b.pixels();
    let masked_obj = |weights: &BasisWeights| -> f64 {
        let flow = b.synthesize(weights);
        let (fdx, fdy) = flow.data().split_at(hw);
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                let idx = i * w + j;
                if !frozen[idx] {
                    continue;
                }
                let v = geometry::bilinear(a_px, w, h, j as f64 + fdx[idx], i as f64 + fdy[idx])
                    .expect("frozen mask keeps taps interior");
                let d = v - b_px[idx];
                acc += d * d;
            }
        }
        acc / n_valid as f64
    };

    // Analytic gradient of the masked mean: (2/N) Jᵀ r with the
    // central-difference image gradients sampled through the warp.
    let (gx_img, gy_img) = gradient_planes(i_a);
    let (sx, sy) = b.pixel_scale();
    let q = b.q();
    let mut analytic = [0.0f64; 8];
    for i in 0..h {
        for j in 0..w {
            let idx = i * w + j;
            if !frozen[idx] {
                continue;
            }
            let col = j as f64 + fdx0[idx];
            let row = i as f64 + fdy0[idx];
            let aw = geometry::bilinear(a_px, w, h, col, row).expect("interior");
            let gxw = geometry::bilinear(&gx_img, w, h, col, row).expect("interior");
            let gyw = geometry::bilinear(&gy_img, w, h, col, row).expect("interior");
            let r = aw - b_px[idx];
            for (k, acc) in analytic.iter_mut().enumerate() {
                let jk = gxw * q[(idx, k)] * sx + gyw * q[(hw + idx, k)] * sy;
                *acc += 2.0 * jk * r;
            }
        }
    }
    for acc in analytic.iter_mut() {
        *acc /= n_valid as f64;
    }

    let step = 1e-4;
    let mut fd = [0.0f64; 8];
    for k in 0..8 {
        let mut plus = *alpha;
        let mut minus = *alpha;
        plus.0[k] += step;
        minus.0[k] -= step;
        fd[k] = (masked_obj(&plus) - masked_obj(&minus)) / (2.0 * step);
    }

    let max_norm = |g: &[f64; 8]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let denom = max_norm(&analytic).max(max_norm(&fd));
    if denom == 0.0 {
        return Ok(0.0);
    }
    let worst = analytic
        .iter()
        .zip(&fd)
        .fold(0.0f64, |m, (a, f)| m.max((a - f).abs()));
    Ok(worst / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn basis() -> BasisSet {
        BasisSet::build(32, 24).unwrap()
    }

    fn correspondences_from_weights(
        b: &BasisSet,
        alpha: &BasisWeights,
        n: usize,
        seed: u64,
    ) -> Vec<Correspondence> {
        let mut rng = CounterRng::new(seed);
        let (sx, sy) = b.pixel_scale();
        let pts: Vec<Point2> = (0..n)
            .map(|_| {
                Point2::new(
                    rng.uniform(-sx, sx),
                    rng.uniform(-sy, sy),
                )
            })
            .collect();
        let rows = b.evaluate_at(&pts);
        pts.iter()
            .zip(rows)
            .map(|(p, basis_rows)| {
                let mut dx = 0.0;
                let mut dy = 0.0;
                for k in 0..8 {
                    dx += basis_rows[k][0] * sx * alpha.0[k];
                    dy += basis_rows[k][1] * sy * alpha.0[k];
                }
                Correspondence::new(*p, Point2::new(p.x + dx, p.y + dy))
            })
            .collect()
    }

    #[test]
    fn fit_sparse_recovers_exact_weights() {
        let b = basis();
        let alpha = BasisWeights([0.02, -0.01, 0.05, 0.01, 0.03, -0.04, 0.008, -0.006]);
        let corrs = correspondences_from_weights(&b, &alpha, 8, 1);
        let (got, rms) = fit_sparse(&b, &corrs).unwrap();
        assert!(got.max_abs_diff(&alpha) < 1e-8, "{got:?}");
        assert!(rms < 1e-9);
    }

    #[test]
    fn fit_sparse_handles_four_point_translation() {
        let b = basis();
        let corrs: Vec<Correspondence> = [
            Point2::new(-10.0, -8.0),
            Point2::new(10.0, -8.0),
            Point2::new(10.0, 8.0),
            Point2::new(-10.0, 8.0),
        ]
        .iter()
        .map(|&p| Correspondence::new(p, Point2::new(p.x + 2.0, p.y)))
        .collect();
        let (alpha, rms) = fit_sparse(&b, &corrs).unwrap();
        assert!(rms < 1e-9, "rms {rms}");
        let flow = b.synthesize(&alpha);
        let (dx, dy) = flow.at(12, 16);
        assert!((dx - 2.0).abs() < 1e-8 && dy.abs() < 1e-8);
    }

    #[test]
    fn fit_sparse_rejects_too_few_points() {
        let b = basis();
        let corrs = vec![Correspondence::new(Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)); 3];
        assert!(matches!(
            fit_sparse(&b, &corrs),
            Err(Error::UnderdeterminedSystem(_))
        ));
    }

    #[test]
    fn fit_robust_on_clean_flow_matches_analyze() {
        let b = basis();
        let alpha = BasisWeights([0.01, 0.0, 0.04, -0.01, 0.02, 0.03, 0.002, -0.001]);
        let flow = b.synthesize(&alpha);
        let fit = fit_robust(&b, Observations::Flow(&flow), &RobustConfig::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.weights.max_abs_diff(&alpha) < 1e-8);
        assert!(fit.robust_weights.iter().all(|&w| w > 0.999));
    }

    #[test]
    fn first_robust_iterate_equals_fit_sparse() {
        let b = basis();
        let alpha = BasisWeights([0.0, 0.01, -0.03, 0.02, 0.0, 0.05, 0.0, 0.004]);
        let mut corrs = correspondences_from_weights(&b, &alpha, 30, 2);
        // Perturb one point so the fit is not exact and iterations matter.
        corrs[0].dst.x += 3.0;
        let cfg = RobustConfig {
            max_iters: 1,
            ..Default::default()
        };
        let robust = fit_robust(&b, Observations::Sparse(&corrs), &cfg).unwrap();
        let (sparse, _) = fit_sparse(&b, &corrs).unwrap();
        assert_eq!(robust.weights, sparse);
        assert!(!robust.converged || robust.iterations == 1);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let b = basis();
        let flow = FlowField::zeros(32, 24);
        let bad = RobustConfig {
            scale: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            fit_robust(&b, Observations::Flow(&flow), &bad),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            Aligner::new(32, 24, AlignConfig {
                pyramid_levels: 99,
                ..Default::default()
            }),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn align_identical_images_returns_identity() {
        let mut rng = CounterRng::new(5);
        let img = GrayImage::from_fn(32, 24, |_, _| rng.next_f64());
        let b = basis();
        let cfg = AlignConfig {
            pyramid_levels: 2,
            ..Default::default()
        };
        let res = align_direct(&img, &img, &b, &cfg).unwrap();
        assert!(res.converged);
        assert_eq!(res.photometric_error, 0.0);
        assert!(res.weights.norm() == 0.0);
        let id = Homography::identity();
        for i in 0..3 {
            for j in 0..3 {
                assert!((res.homography.entries()[i][j] - id.entries()[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn align_rejects_textureless_images() {
        let flat = GrayImage::constant(32, 24, 0.5);
        let b = basis();
        assert!(matches!(
            align_direct(&flat, &flat, &b, &AlignConfig::default()),
            Err(Error::NoTexture(_))
        ));
    }

    #[test]
    fn gradient_check_is_zero_for_constant_images() {
        // Constant images never pass the NoTexture gate of align, but the
        // gradient check itself must see two exactly-zero gradients.
        let img = GrayImage::constant(24, 16, 0.25);
        let b = BasisSet::build(24, 16).unwrap();
        let err = gn_gradient_check(&img, &img, &b, &BasisWeights::zeros()).unwrap();
        assert_eq!(err, 0.0);
    }
}

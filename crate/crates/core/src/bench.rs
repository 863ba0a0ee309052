//! Seeded synthetic benchmark: image pairs under a known homography with
//! labeled point pairs, plus the point-matching-error metric and the
//! inlier-fraction robustness curve.
//!
//! Every sample is a pure function of `(spec, sample index)` through
//! counter-based RNG substreams, so suites regenerate bit-identically in any
//! order and under any parallelism.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::fitting::{self, AlignConfig, Aligner, Observations, RobustConfig};
use crate::geometry::{
    self, centered_x, centered_y, dlt, homography_to_flow, FlowField, GrayImage, Homography,
    Point2, ValidityMask,
};
use crate::rng::CounterRng;

pub mod textures;

/// Default benchmark grid: the 320-row by 576-column working patch.
pub const DEFAULT_WIDTH: usize = 576;
/// Default benchmark grid height.
pub const DEFAULT_HEIGHT: usize = 320;

/// Independent-motion block pasted into the target image (or flow).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub block_width: usize,
    pub block_height: usize,
    /// Content shift of the block in pixels.
    pub shift: (f64, f64),
    /// Number of blocks.
    pub count: usize,
}

/// Procedural base-image family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    /// Multi-octave value noise (regular scenes).
    Noise,
    /// Low-frequency value noise (low-texture scenes).
    LowFreq,
    /// Checkerboard with mild noise.
    Checker,
    /// Diagonal intensity ramp.
    Ramp,
}

/// Generator parameters for one benchmark suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSpec {
    /// Identifier echoed into result rows.
    #[serde(default = "default_spec_id")]
    pub id: String,
    pub seed: u64,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    /// Max corner offset in pixels.
    pub rho: f64,
    /// Additive Gaussian intensity noise applied to the target image.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Uniform gain range applied to the target image.
    #[serde(default = "default_gain")]
    pub gain: (f64, f64),
    /// Uniform bias range applied to the target image.
    #[serde(default = "default_bias")]
    pub bias: (f64, f64),
    #[serde(default)]
    pub outlier: Option<OutlierSpec>,
    /// Number of samples in the suite.
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_texture")]
    pub texture: TextureKind,
}

fn default_spec_id() -> String {
    "suite".into()
}
fn default_width() -> usize {
    DEFAULT_WIDTH
}
fn default_height() -> usize {
    DEFAULT_HEIGHT
}
fn default_gain() -> (f64, f64) {
    (1.0, 1.0)
}
fn default_bias() -> (f64, f64) {
    (0.0, 0.0)
}
fn default_count() -> usize {
    10
}
fn default_texture() -> TextureKind {
    TextureKind::Noise
}

impl BenchSpec {
    /// Regular-texture suite at the default grid size.
    pub fn new(id: &str, seed: u64, rho: f64) -> Self {
        Self {
            id: id.into(),
            seed,
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            rho,
            noise_sigma: 0.0,
            gain: (1.0, 1.0),
            bias: (0.0, 0.0),
            outlier: None,
            count: default_count(),
            texture: TextureKind::Noise,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::SpecInfeasible(format!(
                "patch {}x{} too small",
                self.width, self.height
            )));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::SpecInfeasible("rho must be >= 0".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::SpecInfeasible("noise_sigma must be >= 0".into()));
        }
        if self.count == 0 {
            return Err(Error::SpecInfeasible("count must be positive".into()));
        }
        if let Some(o) = &self.outlier {
            if o.block_width == 0
                || o.block_height == 0
                || o.block_width > self.width
                || o.block_height > self.height
            {
                return Err(Error::SpecInfeasible(format!(
                    "outlier block {}x{} does not fit in {}x{}",
                    o.block_width, o.block_height, self.width, self.height
                )));
            }
            if o.count == 0 {
                return Err(Error::SpecInfeasible("outlier count must be positive".into()));
            }
        }
        Ok(())
    }

    /// Margin (pixels) that the base image must carry around the patch.
    pub fn margin(&self) -> usize {
        (self.rho.ceil() as usize) * 2 + 2
    }

    /// Procedural base image large enough for [`gen_pair`], varying with the
    /// sample index.
    pub fn base_image(&self, sample_idx: u64) -> GrayImage {
        let m = self.margin();
        textures::generate(
            self.texture,
            self.width + 2 * m,
            self.height + 2 * m,
            CounterRng::substream(self.seed, sample_idx ^ 0x7465_7874),
        )
    }
}

/// One synthetic pair with its ground truth.
#[derive(Debug, Clone)]
pub struct BenchSample {
    pub i_a: GrayImage,
    pub i_b: GrayImage,
    /// Source-to-target point map: a point at `src` in `i_a` shows the same
    /// content as `apply(gt, src)` in `i_b`.
    pub gt: Homography,
    /// Six labeled pairs with `dst = apply(gt, src)` exactly.
    pub gt_points: [(Point2, Point2); 6],
    /// False inside pasted outlier blocks.
    pub outlier_mask: Option<ValidityMask>,
}

/// Generates one sample from a base image.
///
/// Protocol: sample 4 corner offsets uniform in `[-rho, rho]^2`, fit `gt` by
/// DLT on the corner pairs, render `i_b` by backward-sampling the base
/// through `gt⁻¹` (so content at `src` in `i_a` appears at `apply(gt, src)`
/// in `i_b`), paste optional independently moving blocks, apply gain/bias
/// and pixel noise, and pick 6 well-spread point pairs avoiding the blocks.
/// Deterministic given `(base, spec, sample_idx)`.
pub fn gen_pair(base: &GrayImage, spec: &BenchSpec, sample_idx: u64) -> Result<BenchSample> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let need_w = w + 2 * spec.rho.ceil() as usize;
    let need_h = h + 2 * spec.rho.ceil() as usize;
    if base.width() < need_w || base.height() < need_h {
        return Err(Error::SpecInfeasible(format!(
            "base {}x{} cannot host a {w}x{h} patch with margin {}",
            base.width(),
            base.height(),
            spec.rho.ceil()
        )));
    }
    let mut rng = CounterRng::substream(spec.seed, sample_idx);

    // Ground truth from perturbed corners (exact identity when rho = 0).
    let gt = if spec.rho == 0.0 {
        Homography::identity()
    } else {
        let half_x = centered_x(w - 1, w);
        let half_y = centered_y(h - 1, h);
        let corners = [
            Point2::new(-half_x, -half_y),
            Point2::new(half_x, -half_y),
            Point2::new(half_x, half_y),
            Point2::new(-half_x, half_y),
        ];
        let pairs: Vec<(Point2, Point2)> = corners
            .iter()
            .map(|&c| {
                let dx = rng.uniform(-spec.rho, spec.rho);
                let dy = rng.uniform(-spec.rho, spec.rho);
                (c, Point2::new(c.x + dx, c.y + dy))
            })
            .collect();
        dlt(&pairs)?
    };
    let gt_inv = gt.invert()?;

    // Patch origin inside the base image (centered crop).
    let off_x = ((base.width() - w) / 2) as f64;
    let off_y = ((base.height() - h) / 2) as f64;
    let mut a_px = vec![0.0; w * h];
    exec::for_each_row_mut(&mut a_px, w, |i, row| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = base.get(i + off_y as usize, j + off_x as usize);
        }
    });
    let i_a = GrayImage::from_raw(w, h, a_px);

    // i_b(p) = base(gt⁻¹(p)) sampled from the base so borders stay filled.
    let base_px = base.pixels();
    let (bw, bh) = (base.width(), base.height());
    let gm = *gt_inv.entries();
    let mut b_px = vec![0.0; w * h];
    exec::for_each_row_mut(&mut b_px, w, |i, row| {
        let y = centered_y(i, h);
        for (j, v) in row.iter_mut().enumerate() {
            let x = centered_x(j, w);
            let wdiv = gm[2][0] * x + gm[2][1] * y + 1.0;
            let qx = (gm[0][0] * x + gm[0][1] * y + gm[0][2]) / wdiv;
            let qy = (gm[1][0] * x + gm[1][1] * y + gm[1][2]) / wdiv;
            // Back to base array coordinates.
            let col = qx + (w as f64 - 1.0) / 2.0 + off_x;
            let rowc = qy + (h as f64 - 1.0) / 2.0 + off_y;
            *v = geometry::bilinear(base_px, bw, bh, col, rowc).unwrap_or(0.0);
        }
    });

    // Outlier blocks: content sampled at an independent shift.
    let mut outlier_mask: Option<ValidityMask> = None;
    if let Some(o) = &spec.outlier {
        let mut mask = ValidityMask::all_valid(w, h);
        for _ in 0..o.count {
            let x0 = rng.uniform_usize(w - o.block_width + 1);
            let y0 = rng.uniform_usize(h - o.block_height + 1);
            for i in y0..y0 + o.block_height {
                for j in x0..x0 + o.block_width {
                    let col = j as f64 + off_x + o.shift.0;
                    let rowc = i as f64 + off_y + o.shift.1;
                    b_px[i * w + j] =
                        geometry::bilinear(base_px, bw, bh, col, rowc).unwrap_or(0.0);
                    mask.set(i, j, false);
                }
            }
        }
        outlier_mask = Some(mask);
    }

    // Photometric perturbation: gain/bias then per-pixel Gaussian noise.
    let gain = rng.uniform(spec.gain.0, spec.gain.1);
    let bias = rng.uniform(spec.bias.0, spec.bias.1);
    if gain != 1.0 || bias != 0.0 || spec.noise_sigma > 0.0 {
        let noise_rng = rng; // forked: per-pixel draws are counter-addressed
        let sigma = spec.noise_sigma;
        exec::for_each_row_mut(&mut b_px, w, |i, row| {
            for (j, v) in row.iter_mut().enumerate() {
                let mut val = gain * *v + bias;
                if sigma > 0.0 {
                    let mut r = noise_rng.at(2 * (i * w + j) as u64);
                    val += sigma * r.next_gauss();
                }
                *v = val.clamp(0.0, 1.0);
            }
        });
    }
    let i_b = GrayImage::from_raw(w, h, b_px);

    // Six well-spread ground-truth pairs avoiding outlier blocks.
    let mut jitter_rng = rng.at(1_000_000);
    let fractions = [
        (0.15, 0.25),
        (0.50, 0.25),
        (0.85, 0.25),
        (0.15, 0.75),
        (0.50, 0.75),
        (0.85, 0.75),
    ];
    let mut gt_points = [(Point2::new(0.0, 0.0), Point2::new(0.0, 0.0)); 6];
    for (slot, &(fx, fy)) in fractions.iter().enumerate() {
        let mut src = Point2::new(0.0, 0.0);
        for _attempt in 0..20 {
            let jx = jitter_rng.uniform(-0.05, 0.05);
            let jy = jitter_rng.uniform(-0.05, 0.05);
            let col = (fx + jx).clamp(0.02, 0.98) * (w as f64 - 1.0);
            let row = (fy + jy).clamp(0.02, 0.98) * (h as f64 - 1.0);
            src = Point2::new(col - (w as f64 - 1.0) / 2.0, row - (h as f64 - 1.0) / 2.0);
            let clear = match &outlier_mask {
                Some(mask) => {
                    let ji = col.round() as usize;
                    let ii = row.round() as usize;
                    mask.get(ii.min(h - 1), ji.min(w - 1))
                }
                None => true,
            };
            if clear {
                break;
            }
        }
        let dst = gt.apply(src)?;
        gt_points[slot] = (src, dst);
    }

    Ok(BenchSample {
        i_a,
        i_b,
        gt,
        gt_points,
        outlier_mask,
    })
}

/// Per-point distances `|apply(h, src) - dst|`; a projection failure counts
/// as an infinite error rather than aborting the evaluation.
pub fn point_errors(h_est: &Homography, gt_points: &[(Point2, Point2)]) -> Vec<f64> {
    gt_points
        .iter()
        .map(|(src, dst)| match h_est.apply(*src) {
            Ok(p) => p.distance(dst),
            Err(_) => f64::INFINITY,
        })
        .collect()
}

/// Mean L2 distance between warped source points and target points.
pub fn point_matching_error(h_est: &Homography, gt_points: &[(Point2, Point2)]) -> f64 {
    let errs = point_errors(h_est, gt_points);
    errs.iter().sum::<f64>() / errs.len() as f64
}

/// Inlier fraction (`error < threshold`, strict) per threshold.
pub fn robustness_curve(per_point_errors: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    thresholds
        .iter()
        .map(|&t| {
            let inliers = per_point_errors.iter().filter(|&&e| e < t).count();
            (t, inliers as f64 / per_point_errors.len().max(1) as f64)
        })
        .collect()
}

/// The standard threshold sweep 0.1, 0.2, ..., 3.0.
pub fn default_thresholds() -> Vec<f64> {
    (1..=30).map(|k| k as f64 / 10.0).collect()
}

/// Estimator run by [`run_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// The identity homography; reports the raw displacement of the points.
    Identity,
    /// Robust IRLS fit on the ground-truth flow (corrupted inside outlier
    /// blocks when the spec defines them).
    RobustGtFlow,
    /// Direct photometric alignment of the image pair.
    AlignDirect,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::RobustGtFlow => "robust",
            Self::AlignDirect => "align",
        }
    }
}

/// One CSV row of a suite run.
#[derive(Debug, Clone)]
pub struct SampleRow {
    pub spec_id: String,
    pub sample_idx: usize,
    pub method: &'static str,
    pub mean_error_px: f64,
    pub valid_fraction: f64,
    pub status: String,
    /// Per-point errors feeding the robustness curve (empty on failure).
    pub point_errors: Vec<f64>,
}

/// Aggregated output of [`run_suite`].
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub rows: Vec<SampleRow>,
    /// Robustness curve of the requested method over all point errors.
    pub curve: Vec<(f64, f64)>,
}

/// Ground-truth flow with the spec's outlier blocks overwritten by their
/// independent motion: block content shifted by `s` has point flow `-s`.
pub fn gt_flow_with_outliers(sample: &BenchSample, spec: &BenchSpec) -> Result<FlowField> {
    let mut flow = homography_to_flow(&sample.gt, spec.width, spec.height)?;
    if let (Some(mask), Some(o)) = (&sample.outlier_mask, &spec.outlier) {
        for i in 0..spec.height {
            for j in 0..spec.width {
                if !mask.get(i, j) {
                    flow.set(i, j, -o.shift.0, -o.shift.1);
                }
            }
        }
    }
    Ok(flow)
}

/// Estimates one sample with the chosen method. Returns the estimated
/// homography and a valid fraction (1 for non-warping methods).
fn estimate(
    sample: &BenchSample,
    spec: &BenchSpec,
    method: Method,
    basis: Option<&crate::bases::BasisSet>,
    aligner: Option<&Aligner>,
) -> Result<(Homography, f64)> {
    match method {
        Method::Identity => Ok((Homography::identity(), 1.0)),
        Method::RobustGtFlow => {
            let basis = basis.expect("robust method requires a prepared basis");
            let flow = gt_flow_with_outliers(sample, spec)?;
            let fit =
                fitting::fit_robust(basis, Observations::Flow(&flow), &RobustConfig::default())?;
            let h = geometry::flow_to_homography(&basis.synthesize(&fit.weights))?;
            Ok((h, 1.0))
        }
        Method::AlignDirect => {
            let aligner = aligner.expect("align method requires a prepared aligner");
            let res = aligner.align(&sample.i_a, &sample.i_b)?;
            Ok((res.homography, res.valid_fraction))
        }
    }
}

/// Runs every sample of every spec with `method`, producing deterministic,
/// index-ordered rows plus the pooled robustness curve. A failed sample
/// yields an error-tagged row, never a crash.
pub fn run_suite(specs: &[BenchSpec], method: Method) -> Result<SuiteResult> {
    let mut rows = Vec::new();
    for spec in specs {
        spec.validate()?;
        let aligner = if method == Method::AlignDirect {
            let max_levels = ((spec.width.min(spec.height) as f64).log2().floor() as usize)
                .saturating_sub(2);
            Some(Aligner::new(
                spec.width,
                spec.height,
                AlignConfig {
                    pyramid_levels: max_levels.min(4).max(1),
                    ..Default::default()
                },
            )?)
        } else {
            None
        };
        let basis = if method == Method::RobustGtFlow {
            Some(crate::bases::BasisSet::build(spec.width, spec.height)?)
        } else {
            None
        };
        let spec_rows: Vec<SampleRow> = exec::collect_indexed(spec.count, |idx| {
            let outcome = gen_pair(&spec.base_image(idx as u64), spec, idx as u64)
                .and_then(|sample| {
                    estimate(&sample, spec, method, basis.as_ref(), aligner.as_ref())
                        .map(|(h, vf)| (sample, h, vf))
                });
            match outcome {
                Ok((sample, h_est, valid_fraction)) => {
                    let errs = point_errors(&h_est, &sample.gt_points);
                    SampleRow {
                        spec_id: spec.id.clone(),
                        sample_idx: idx,
                        method: method.name(),
                        mean_error_px: errs.iter().sum::<f64>() / errs.len() as f64,
                        valid_fraction,
                        status: "ok".into(),
                        point_errors: errs,
                    }
                }
                Err(e) => SampleRow {
                    spec_id: spec.id.clone(),
                    sample_idx: idx,
                    method: method.name(),
                    mean_error_px: f64::NAN,
                    valid_fraction: 0.0,
                    status: error_tag(&e).into(),
                    point_errors: Vec::new(),
                },
            }
        });
        rows.extend(spec_rows);
    }
    let pooled: Vec<f64> = rows
        .iter()
        .filter(|r| r.status == "ok")
        .flat_map(|r| r.point_errors.iter().copied())
        .collect();
    let curve = robustness_curve(&pooled, &default_thresholds());
    Ok(SuiteResult { rows, curve })
}

fn error_tag(e: &Error) -> &'static str {
    match e {
        Error::NoTexture(_) => "NoTexture",
        Error::EmptyMask => "EmptyMask",
        Error::DegenerateProjection(_) => "DegenerateProjection",
        Error::DegenerateConfiguration(_) => "DegenerateConfiguration",
        Error::UnderdeterminedSystem(_) => "UnderdeterminedSystem",
        Error::SpecInfeasible(_) => "SpecInfeasible",
        _ => "Error",
    }
}

/// Renders suite rows as CSV with the fixed schema
/// `spec_id,sample_idx,method,mean_error_px,valid_fraction,status`,
/// appending one `mean` summary row per spec (over its ok samples).
pub fn suite_csv(result: &SuiteResult) -> String {
    let mut out = String::from("spec_id,sample_idx,method,mean_error_px,valid_fraction,status\n");
    for r in &result.rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{}\n",
            r.spec_id,
            r.sample_idx,
            r.method,
            if r.mean_error_px.is_nan() {
                "nan".to_string()
            } else {
                format!("{:.6}", r.mean_error_px)
            },
            r.valid_fraction,
            r.status
        ));
    }
    // Per-spec means over ok rows, in first-appearance order.
    let mut seen: Vec<&str> = Vec::new();
    for r in &result.rows {
        if !seen.contains(&r.spec_id.as_str()) {
            seen.push(&r.spec_id);
        }
    }
    for id in seen {
        let ok: Vec<&SampleRow> = result
            .rows
            .iter()
            .filter(|r| r.spec_id == id && r.status == "ok")
            .collect();
        if ok.is_empty() {
            continue;
        }
        let mean = ok.iter().map(|r| r.mean_error_px).sum::<f64>() / ok.len() as f64;
        let vf = ok.iter().map(|r| r.valid_fraction).sum::<f64>() / ok.len() as f64;
        let method = ok[0].method;
        out.push_str(&format!("{id},mean,{method},{mean:.6},{vf:.6},ok\n"));
    }
    out
}

/// Renders a robustness curve as CSV (`threshold,fraction`).
pub fn curve_csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("threshold,fraction\n");
    for (t, f) in curve {
        out.push_str(&format!("{t:.1},{f:.6}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(rho: f64) -> BenchSpec {
        BenchSpec {
            id: "test".into(),
            seed: 7,
            width: 64,
            height: 48,
            rho,
            noise_sigma: 0.0,
            gain: (1.0, 1.0),
            bias: (0.0, 0.0),
            outlier: None,
            count: 3,
            texture: TextureKind::Noise,
        }
    }

    #[test]
    fn rho_zero_reproduces_the_source_patch() {
        let spec = small_spec(0.0);
        let sample = gen_pair(&spec.base_image(0), &spec, 0).unwrap();
        assert_eq!(sample.gt, Homography::identity());
        assert_eq!(sample.i_a, sample.i_b);
    }

    #[test]
    fn same_seed_gives_bit_identical_samples() {
        let spec = small_spec(3.0);
        let a = gen_pair(&spec.base_image(1), &spec, 1).unwrap();
        let b = gen_pair(&spec.base_image(1), &spec, 1).unwrap();
        assert_eq!(a.i_a, b.i_a);
        assert_eq!(a.i_b, b.i_b);
        assert_eq!(a.gt, b.gt);
        for (pa, pb) in a.gt_points.iter().zip(b.gt_points.iter()) {
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn gt_points_satisfy_the_homography_exactly() {
        let spec = small_spec(4.0);
        let sample = gen_pair(&spec.base_image(2), &spec, 2).unwrap();
        for (src, dst) in &sample.gt_points {
            let mapped = sample.gt.apply(*src).unwrap();
            assert!(mapped.distance(dst) < 1e-9);
        }
        assert!(point_matching_error(&sample.gt, &sample.gt_points) < 1e-9);
    }

    #[test]
    fn identity_error_on_translation_sample_is_the_shift() {
        // Hand-build a sample with a pure-translation gt.
        let gt = Homography::translation(3.0, 4.0);
        let src = Point2::new(1.0, -2.0);
        let pts: Vec<(Point2, Point2)> = (0..6)
            .map(|k| {
                let p = Point2::new(src.x + k as f64, src.y);
                (p, gt.apply(p).unwrap())
            })
            .collect();
        let err = point_matching_error(&Homography::identity(), &pts);
        assert!((err - 5.0).abs() < 1e-12);
    }

    #[test]
    fn small_base_is_rejected() {
        let spec = small_spec(6.0);
        let tiny = GrayImage::constant(spec.width, spec.height, 0.5);
        assert!(matches!(
            gen_pair(&tiny, &spec, 0),
            Err(Error::SpecInfeasible(_))
        ));
    }

    #[test]
    fn robustness_curve_fixtures() {
        let errs = [0.05, 0.5, 2.5];
        let curve = robustness_curve(&errs, &[1.0]);
        assert!((curve[0].1 - 2.0 / 3.0).abs() < 1e-12);
        let zeros = [0.0; 5];
        for (_, frac) in robustness_curve(&zeros, &default_thresholds()) {
            assert_eq!(frac, 1.0);
        }
        let sweep = robustness_curve(&errs, &default_thresholds());
        for pair in sweep.windows(2) {
            assert!(pair[0].1 <= pair[1].1, "curve must be monotone");
        }
    }

    #[test]
    fn identity_suite_on_rho_zero_is_all_zeros() {
        let spec = small_spec(0.0);
        let result = run_suite(&[spec], Method::Identity).unwrap();
        assert_eq!(result.rows.len(), 3);
        for row in &result.rows {
            assert_eq!(row.status, "ok");
            assert_eq!(row.mean_error_px, 0.0);
        }
        for (_, frac) in &result.curve {
            assert_eq!(*frac, 1.0);
        }
    }

    #[test]
    fn suite_csv_has_the_pinned_schema() {
        let spec = small_spec(0.0);
        let result = run_suite(&[spec], Method::Identity).unwrap();
        let csv = suite_csv(&result);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "spec_id,sample_idx,method,mean_error_px,valid_fraction,status"
        );
        assert!(csv.lines().any(|l| l.starts_with("test,mean,identity,")));
        let curve = curve_csv(&result.curve);
        assert!(curve.starts_with("threshold,fraction\n0.1,"));
    }

    #[test]
    fn outlier_blocks_are_marked_and_moved() {
        let mut spec = small_spec(0.0);
        spec.outlier = Some(OutlierSpec {
            block_width: 16,
            block_height: 16,
            shift: (5.0, 0.0),
            count: 1,
        });
        let sample = gen_pair(&spec.base_image(3), &spec, 3).unwrap();
        let mask = sample.outlier_mask.as_ref().unwrap();
        let outliers = mask.mask().iter().filter(|&&m| !m).count();
        assert_eq!(outliers, 16 * 16);
        // Point pairs avoid the block.
        for (src, _) in &sample.gt_points {
            let j = (src.x + (spec.width as f64 - 1.0) / 2.0).round() as usize;
            let i = (src.y + (spec.height as f64 - 1.0) / 2.0).round() as usize;
            assert!(mask.get(i, j), "gt point inside outlier block");
        }
    }
}

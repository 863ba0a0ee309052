//! Unsupervised alignment objective: triplet loss, feature identity loss,
//! inverse-consistency, and the combined energy.
//!
//! All L1 terms are means over valid pixels and channels, which keeps the
//! magnitudes resolution-independent. Both triplet terms share the warp's
//! validity mask so the aligned and unaligned distances compare the same
//! pixel set. Reductions fold per-row partials in row order and are therefore
//! bit-reproducible for any thread count.

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{FlowField, GrayImage, ValidityMask};
use crate::subspace::FeatureMap;

/// Default weight of the feature-identity terms in the total objective.
pub const DEFAULT_LAMBDA: f64 = 1.0;
/// Default weight of the inverse-consistency term in the total objective.
pub const DEFAULT_MU: f64 = 0.001;

/// Fixed warp-equivariant-ish feature stand-ins. `Identity` is exactly
/// equivariant; the others break equivariance by a measurable amount, which
/// is what the feature identity loss quantifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureTransform {
    /// The image itself (C = 1).
    Identity,
    /// Central-difference gradient magnitude with clamped borders (C = 1).
    GradientMagnitude,
    /// 3x3 box mean with clamped borders (C = 1).
    BoxMean3,
    /// Channel stack of the three above (C = 3).
    Stack3,
}

impl FeatureTransform {
    pub fn channels(&self) -> usize {
        match self {
            Self::Stack3 => 3,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::GradientMagnitude => "gradient",
            Self::BoxMean3 => "boxmean",
            Self::Stack3 => "stack",
        }
    }

    /// Applies the transform; output spatial dims equal the input's.
    pub fn apply(&self, img: &GrayImage) -> FeatureMap {
        match self {
            Self::Identity => FeatureMap::from_image(img),
            Self::GradientMagnitude => plane_map(img, gradient_magnitude_plane(img)),
            Self::BoxMean3 => plane_map(img, box_mean_plane(img)),
            Self::Stack3 => {
                let (w, h) = (img.width(), img.height());
                let grad = gradient_magnitude_plane(img);
                let boxm = box_mean_plane(img);
                let mut data = vec![0.0; w * h * 3];
                for p in 0..w * h {
                    data[p * 3] = img.pixels()[p];
                    data[p * 3 + 1] = grad[p];
                    data[p * 3 + 2] = boxm[p];
                }
                FeatureMap::new(w, h, 3, data).expect("shape is consistent")
            }
        }
    }
}

fn plane_map(img: &GrayImage, plane: Vec<f64>) -> FeatureMap {
    FeatureMap::new(img.width(), img.height(), 1, plane).expect("shape is consistent")
}

fn gradient_magnitude_plane(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let px = img.pixels();
    let mut out = vec![0.0; w * h];
    exec::for_each_row_mut(&mut out, w, |i, row| {
        let i_up = i.saturating_sub(1);
        let i_dn = (i + 1).min(h - 1);
        for (j, v) in row.iter_mut().enumerate() {
            let j_lf = j.saturating_sub(1);
            let j_rt = (j + 1).min(w - 1);
            let gx = (px[i * w + j_rt] - px[i * w + j_lf]) / 2.0;
            let gy = (px[i_dn * w + j] - px[i_up * w + j]) / 2.0;
            *v = gx.hypot(gy);
        }
    });
    out
}

fn box_mean_plane(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let px = img.pixels();
    let mut out = vec![0.0; w * h];
    exec::for_each_row_mut(&mut out, w, |i, row| {
        for (j, v) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                    let jj = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                    acc += px[ii * w + jj];
                }
            }
            *v = acc / 9.0;
        }
    });
    out
}

/// Backward-warps every channel of a feature map by one flow. The validity
/// mask depends only on the flow, so it is shared across channels; invalid
/// pixels are zeroed in all channels.
pub fn warp_feature_map(f: &FeatureMap, flow: &FlowField) -> Result<(FeatureMap, ValidityMask)> {
    let (w, h, c) = (f.width(), f.height(), f.channels());
    if flow.width() != w || flow.height() != h {
        return Err(Error::DimensionMismatch {
            expected: format!("{w}x{h}"),
            got: format!("{}x{}", flow.width(), flow.height()),
        });
    }
    let hw = w * h;
    let (fdx, fdy) = flow.data().split_at(hw);
    let src = f.data();
    let mut out = vec![0.0; hw * c];
    let mut mask = vec![false; hw];
    exec::for_each_row_pair_mut(&mut out, w * c, &mut mask, w, |i, row_vals, row_mask| {
        for j in 0..w {
            let idx = i * w + j;
            let col = j as f64 + fdx[idx];
            let row = i as f64 + fdy[idx];
            let mut ok = true;
            for ch in 0..c {
                match bilinear_channel(src, w, h, c, ch, col, row) {
                    Some(v) => row_vals[j * c + ch] = v,
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                for ch in 0..c {
                    row_vals[j * c + ch] = 0.0;
                }
            }
            row_mask[j] = ok;
        }
    });
    Ok((
        FeatureMap::new(w, h, c, out)?,
        ValidityMask::from_raw(w, h, mask),
    ))
}

/// Bilinear sample of one channel of an interleaved feature buffer.
#[inline]
fn bilinear_channel(
    data: &[f64],
    width: usize,
    height: usize,
    channels: usize,
    ch: usize,
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
    let at = |i: usize, j: usize| data[(i * width + j) * channels + ch];
    Some(
        (1.0 - fy) * ((1.0 - fx) * at(i0, j0) + fx * at(i0, j0 + 1))
            + fy * ((1.0 - fx) * at(i0 + 1, j0) + fx * at(i0 + 1, j0 + 1)),
    )
}

/// Mean of `|a - b|` over valid pixels and channels. Returns the mean and
/// the valid-pixel fraction.
fn masked_mean_abs_diff(
    a: &FeatureMap,
    b: &FeatureMap,
    mask: &ValidityMask,
) -> Result<(f64, f64)> {
    let (w, h, c) = (a.width(), a.height(), a.channels());
    let partials = exec::collect_indexed(h, |i| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for j in 0..w {
            if mask.get(i, j) {
                for ch in 0..c {
                    sum += (a.get(i, j, ch) - b.get(i, j, ch)).abs();
                }
                count += 1;
            }
        }
        (sum, count)
    });
    let (sum, count) = partials
        .into_iter()
        .fold((0.0, 0usize), |(s, n), (ps, pn)| (s + ps, n + pn));
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((sum / (count * c) as f64, count as f64 / (w * h) as f64))
}

fn check_same_shape(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() || a.channels() != b.channels() {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}x{}", a.width(), a.height(), a.channels()),
            got: format!("{}x{}x{}", b.width(), b.height(), b.channels()),
        });
    }
    Ok(())
}

/// Triplet loss: warp `f_a` by `flow` and return
/// `mean |warp(f_a) - f_b| - mean |f_a - f_b|`, both means over the warp's
/// valid set. Zero flow gives exactly zero for any pair.
pub fn triplet_loss(f_a: &FeatureMap, f_b: &FeatureMap, flow: &FlowField) -> Result<f64> {
    let (value, _) = triplet_loss_with_fraction(f_a, f_b, flow)?;
    Ok(value)
}

/// [`triplet_loss`] plus the valid-pixel fraction of the warp.
pub fn triplet_loss_with_fraction(
    f_a: &FeatureMap,
    f_b: &FeatureMap,
    flow: &FlowField,
) -> Result<(f64, f64)> {
    check_same_shape(f_a, f_b)?;
    let (warped, mask) = warp_feature_map(f_a, flow)?;
    let (aligned, fraction) = masked_mean_abs_diff(&warped, f_b, &mask)?;
    let (unaligned, _) = masked_mean_abs_diff(f_a, f_b, &mask)?;
    Ok((aligned - unaligned, fraction))
}

/// Feature identity loss: masked mean L1 between warp-then-featurize and
/// featurize-then-warp, `|W(f(I)) - f(W(I))|`. Exactly zero for the identity
/// transform and for zero flow; strictly positive when a nonlinear transform
/// meets a real warp.
pub fn fil_loss(img: &GrayImage, f: &FeatureTransform, flow: &FlowField) -> Result<f64> {
    if img.width() != flow.width() || img.height() != flow.height() {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", img.width(), img.height()),
            got: format!("{}x{}", flow.width(), flow.height()),
        });
    }
    let feat = f.apply(img);
    let (feat_of_warped, mask) = {
        let (warped_img, mask) = crate::geometry::warp_image(img, flow)?;
        (f.apply(&warped_img), mask)
    };
    let (warped_feat, _) = warp_feature_map(&feat, flow)?;
    let (value, _) = masked_mean_abs_diff(&warped_feat, &feat_of_warped, &mask)?;
    Ok(value)
}

/// Mean over all pixels of the squared magnitude of `flow_ab + flow_ba`
/// (pixel^2 units). Zero iff the flows are exact pixelwise negatives.
pub fn inverse_consistency(flow_ab: &FlowField, flow_ba: &FlowField) -> Result<f64> {
    if flow_ab.width() != flow_ba.width() || flow_ab.height() != flow_ba.height() {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", flow_ab.width(), flow_ab.height()),
            got: format!("{}x{}", flow_ba.width(), flow_ba.height()),
        });
    }
    let (w, h) = (flow_ab.width(), flow_ab.height());
    let hw = w * h;
    let (adx, ady) = flow_ab.data().split_at(hw);
    let (bdx, bdy) = flow_ba.data().split_at(hw);
    let sum = exec::sum_rows(h, |i| {
        let mut acc = 0.0;
        for j in 0..w {
            let idx = i * w + j;
            let ex = adx[idx] + bdx[idx];
            let ey = ady[idx] + bdy[idx];
            acc += ex * ex + ey * ey;
        }
        acc
    });
    Ok(sum / hw as f64)
}

/// Full objective report. `total` is reconstructible bit-exactly as
/// `triplet + lambda*(fil_ab + fil_ba) + mu*inverse_consistency`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    /// Sum of the two directional triplet terms.
    pub triplet: f64,
    pub fil_ab: f64,
    pub fil_ba: f64,
    pub inverse_consistency: f64,
    pub lambda: f64,
    pub mu: f64,
    pub total: f64,
    pub valid_fraction: f64,
}

/// Evaluates the symmetric energy
/// `(L_T^ab + L_T^ba) + lambda (L_W^ab + L_W^ba) + mu * mean|flow_ab + flow_ba|^2`.
///
/// `flow_ab` is the flow consumed to warp `i_a` toward `i_b` (backward
/// sampling) and `flow_ba` the reverse.
pub fn total_objective(
    i_a: &GrayImage,
    i_b: &GrayImage,
    f: &FeatureTransform,
    flow_ab: &FlowField,
    flow_ba: &FlowField,
    lambda: f64,
    mu: f64,
) -> Result<LossReport> {
    let f_a = f.apply(i_a);
    let f_b = f.apply(i_b);
    let (t_ab, frac_ab) = triplet_loss_with_fraction(&f_a, &f_b, flow_ab)?;
    let (t_ba, frac_ba) = triplet_loss_with_fraction(&f_b, &f_a, flow_ba)?;
    let fil_ab = fil_loss(i_a, f, flow_ab)?;
    let fil_ba = fil_loss(i_b, f, flow_ba)?;
    let ic = inverse_consistency(flow_ab, flow_ba)?;
    let triplet = t_ab + t_ba;
    let total = triplet + lambda * (fil_ab + fil_ba) + mu * ic;
    Ok(LossReport {
        triplet,
        fil_ab,
        fil_ba,
        inverse_consistency: ic,
        lambda,
        mu,
        total,
        valid_fraction: 0.5 * (frac_ab + frac_ba),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Homography;
    use crate::rng::CounterRng;

    fn noise_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = CounterRng::new(seed);
        let pixels = (0..w * h).map(|_| rng.next_f64()).collect();
        GrayImage::new(w, h, pixels).unwrap()
    }

    #[test]
    fn triplet_zero_flow_is_exactly_zero() {
        let a = FeatureMap::from_image(&noise_image(16, 12, 1));
        let b = FeatureMap::from_image(&noise_image(16, 12, 2));
        let loss = triplet_loss(&a, &b, &FlowField::zeros(16, 12)).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn triplet_on_exactly_warped_pair_is_negative() {
        let img = noise_image(24, 18, 3);
        let f_a = FeatureMap::from_image(&img);
        let flow = FlowField::constant(24, 18, 2.0, 1.0);
        let (warped, _) = warp_feature_map(&f_a, &flow).unwrap();
        let loss = triplet_loss(&f_a, &warped, &flow).unwrap();
        assert!(loss < -1e-3, "aligned term should vanish, got {loss}");
    }

    #[test]
    fn triplet_reports_empty_mask() {
        let a = FeatureMap::from_image(&noise_image(8, 8, 4));
        let b = FeatureMap::from_image(&noise_image(8, 8, 5));
        let err = triplet_loss(&a, &b, &FlowField::constant(8, 8, 100.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::EmptyMask));
    }

    #[test]
    fn fil_identity_transform_is_exactly_zero() {
        let img = noise_image(20, 15, 6);
        let flow = FlowField::constant(20, 15, 3.5, -1.25);
        let loss = fil_loss(&img, &FeatureTransform::Identity, &flow).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn fil_gradient_zero_flow_is_exactly_zero() {
        let img = noise_image(20, 15, 7);
        let loss = fil_loss(
            &img,
            &FeatureTransform::GradientMagnitude,
            &FlowField::zeros(20, 15),
        )
        .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn fil_gradient_with_translation_is_positive() {
        let img = noise_image(32, 24, 8);
        let flow = FlowField::constant(32, 24, 5.0, 0.0);
        let loss = fil_loss(&img, &FeatureTransform::GradientMagnitude, &flow).unwrap();
        assert!(loss > 1e-6, "nonlinearity should break equivariance: {loss}");
    }

    #[test]
    fn inverse_consistency_of_negated_flow_is_zero() {
        let mut flow = FlowField::zeros(10, 10);
        for i in 0..10 {
            for j in 0..10 {
                flow.set(i, j, (i as f64) * 0.1, (j as f64) * -0.2);
            }
        }
        let neg = FlowField::new(10, 10, flow.data().iter().map(|v| -v).collect()).unwrap();
        assert_eq!(inverse_consistency(&flow, &neg).unwrap(), 0.0);
    }

    #[test]
    fn inverse_consistency_of_translation_pair_is_zero() {
        let h = Homography::translation(2.0, 0.0);
        let f_ab = crate::geometry::homography_to_flow(&h, 12, 9).unwrap();
        let f_ba = crate::geometry::homography_to_flow(&h.invert().unwrap(), 12, 9).unwrap();
        assert_eq!(inverse_consistency(&f_ab, &f_ba).unwrap(), 0.0);
    }

    #[test]
    fn total_objective_on_identical_inputs_is_zero() {
        let img = noise_image(16, 16, 9);
        let zero = FlowField::zeros(16, 16);
        let report = total_objective(
            &img,
            &img,
            &FeatureTransform::Identity,
            &zero,
            &zero,
            DEFAULT_LAMBDA,
            DEFAULT_MU,
        )
        .unwrap();
        assert_eq!(report.triplet, 0.0);
        assert_eq!(report.fil_ab, 0.0);
        assert_eq!(report.fil_ba, 0.0);
        assert_eq!(report.inverse_consistency, 0.0);
        assert_eq!(report.total, 0.0);
        assert_eq!(report.valid_fraction, 1.0);
    }

    #[test]
    fn total_objective_is_symmetric_under_swapping() {
        let a = noise_image(18, 14, 10);
        let b = noise_image(18, 14, 11);
        let h = Homography::translation(1.5, -0.5);
        let f_ab = crate::geometry::homography_to_flow(&h, 18, 14).unwrap();
        let f_ba = crate::geometry::homography_to_flow(&h.invert().unwrap(), 18, 14).unwrap();
        let t = FeatureTransform::GradientMagnitude;
        let fwd = total_objective(&a, &b, &t, &f_ab, &f_ba, 1.0, 0.001).unwrap();
        let swp = total_objective(&b, &a, &t, &f_ba, &f_ab, 1.0, 0.001).unwrap();
        assert_eq!(fwd.total.to_bits(), swp.total.to_bits());
        assert_eq!(fwd.fil_ab.to_bits(), swp.fil_ba.to_bits());
    }

    #[test]
    fn report_total_recomposes_bit_exactly() {
        let a = noise_image(15, 12, 12);
        let b = noise_image(15, 12, 13);
        let f_ab = FlowField::constant(15, 12, 1.0, 1.0);
        let f_ba = FlowField::constant(15, 12, -1.0, -1.0);
        let r = total_objective(
            &a,
            &b,
            &FeatureTransform::BoxMean3,
            &f_ab,
            &f_ba,
            DEFAULT_LAMBDA,
            DEFAULT_MU,
        )
        .unwrap();
        let recomposed =
            r.triplet + r.lambda * (r.fil_ab + r.fil_ba) + r.mu * r.inverse_consistency;
        assert_eq!(r.total.to_bits(), recomposed.to_bits());
    }

    #[test]
    fn losses_ignore_content_only_seen_by_invalid_pixels() {
        // Constant flow (c, 0): output columns >= W-c are invalid; source
        // columns < c-1 are never tapped by any valid output.
        let c = 3usize;
        let (w, h) = (16, 12);
        let img_a = noise_image(w, h, 14);
        let img_b = noise_image(w, h, 15);
        let flow = FlowField::constant(w, h, c as f64, 0.0);
        let f_a = FeatureMap::from_image(&img_a);
        let f_b = FeatureMap::from_image(&img_b);
        let before = triplet_loss(&f_a, &f_b, &flow).unwrap();

        // Scribble over a-content never sampled and b-content only at
        // invalid pixels.
        let mut a2 = f_a.clone();
        let mut b2 = f_b.clone();
        for i in 0..h {
            for j in 0..c - 1 {
                a2.set(i, j, 0, 0.987);
            }
            for j in w - c..w {
                b2.set(i, j, 0, 0.123);
            }
        }
        let after = triplet_loss(&a2, &b2, &flow).unwrap();
        assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn stack_transform_has_three_channels() {
        let img = noise_image(9, 7, 16);
        let f = FeatureTransform::Stack3.apply(&img);
        assert_eq!(f.channels(), 3);
        assert_eq!(f.width(), 9);
        for p in 0..9 * 7 {
            assert_eq!(f.data()[p * 3], img.pixels()[p]);
        }
    }
}

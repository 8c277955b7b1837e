//! Confidence-weighted cross-view consistency scoring.
//!
//! A point is reprojected into every view. Views where it is visible
//! contribute the depth residual `|d_proj - D_i(u_i)|` plus `lambda` times
//! the mean absolute RGB difference, weighted by normalized confidence
//! `C_i / sum_k C_k`. Large scores flag motion.

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Pixel, MIN_DEPTH};
use crate::mask::{Mask, MaskStack};
use crate::purify::{CloudPoint, DynamicPointCloud};
use crate::scene::SceneBundle;
use crate::tensor::TensorMap;

/// Logits are clamped to this magnitude before exponentiation.
pub const LOGIT_CLAMP: f64 = 40.0;
/// Offset in `sigma^2 = 1 / (C - 1 + offset)`.
pub const VARIANCE_OFFSET: f64 = 1e-12;
pub const DEFAULT_LAMBDA: f64 = 1.0 / 3.0;
/// A point stays visible while `d_proj <= D + tolerance * d_proj`.
pub const DEFAULT_OCCLUSION_TOLERANCE: f64 = 0.05;
pub const DEFAULT_THETA_DYN: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("point is not visible in any view")]
    NoVisibleViews,
}

/// `C(u) = 1 + exp(clamp(l(u)))`. The excess `C - 1 = exp(l)` is stored on
/// its own because `1 + e^-40` is not representable above 1 in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub height: usize,
    pub width: usize,
    pub excess: Vec<f64>,
}

impl ConfidenceMap {
    /// `C(row, col)`.
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        1.0 + self.excess(row, col)
    }

    /// `C(row, col) - 1`, strictly positive.
    #[inline]
    pub fn excess(&self, row: usize, col: usize) -> f64 {
        self.excess[row * self.width + col]
    }
}

#[inline]
pub fn confidence_excess(logit: f64) -> f64 {
    logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp()
}

#[inline]
pub fn confidence_from_logit(logit: f64) -> f64 {
    1.0 + confidence_excess(logit)
}

/// Depth variance implied by a confidence, `1 / (C - 1 + 1e-12)`.
#[inline]
pub fn variance_from_confidence(c: f64) -> f64 {
    1.0 / (c - 1.0 + VARIANCE_OFFSET)
}

/// Logit whose confidence corresponds to noise standard deviation `sigma`,
/// i.e. `C - 1 = sigma^-2`. Clamped to the representable logit range.
pub fn logit_for_sigma(sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return LOGIT_CLAMP;
    }
    (-2.0 * sigma.ln()).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// Activates an H x W logit tensor.
pub fn activate_confidence(logits: &TensorMap) -> ConfidenceMap {
    let dims = logits.dims();
    assert_eq!(dims.len(), 2, "confidence logits must be H x W");
    ConfidenceMap {
        height: dims[0],
        width: dims[1],
        excess: logits.data().iter().map(|&l| confidence_excess(l as f64)).collect(),
    }
}

pub fn activate_all(bundle: &SceneBundle) -> Vec<ConfidenceMap> {
    bundle.confidence_logits.iter().map(activate_confidence).collect()
}

/// Gaussian depth observation `N(mean, variance)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthObservation {
    pub mean: f64,
    pub variance: f64,
}

impl DepthObservation {
    pub fn from_confidence(mean: f64, confidence: f64) -> Self {
        Self {
            mean,
            variance: variance_from_confidence(confidence),
        }
    }
}

/// One view's reprojection of a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionRecord {
    pub view: usize,
    pub pixel: Pixel,
    pub projected_depth: f64,
    pub sampled_depth: f64,
    pub projected_color: [f64; 3],
    pub sampled_color: [f64; 3],
    pub confidence: f64,
    pub visible: bool,
}

impl ProjectionRecord {
    /// Signed depth residual `d_proj - D(u)`.
    pub fn depth_residual(&self) -> f64 {
        self.projected_depth - self.sampled_depth
    }

    /// Mean absolute RGB difference.
    pub fn color_residual(&self) -> f64 {
        self.projected_color
            .iter()
            .zip(&self.sampled_color)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 3.0
    }
}

/// How per-view residuals are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// `C_i / sum_k C_k`
    #[default]
    Confidence,
    /// `1 / |V(p)|`
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreParams {
    pub lambda: f64,
    pub occlusion_tolerance: f64,
    pub theta_dyn: f64,
    pub weighting: Weighting,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            occlusion_tolerance: DEFAULT_OCCLUSION_TOLERANCE,
            theta_dyn: DEFAULT_THETA_DYN,
            weighting: Weighting::Confidence,
        }
    }
}

struct Sample {
    depth: f64,
    color: [f64; 3],
    confidence: f64,
}

/// Bilinear sample at subpixel `u`, restricted to valid-depth support
/// pixels. `None` when `u` is outside every pixel footprint or its nearest
/// pixel has no valid depth. Positions within half a pixel of the border
/// sample the border.
fn sample_view(bundle: &SceneBundle, conf: &ConfidenceMap, view: usize, u: &Pixel) -> Option<Sample> {
    let (h, w) = (bundle.height, bundle.width);
    // in bounds means inside some pixel's footprint
    if !(u.x >= -0.5 && u.y >= -0.5 && u.x < w as f64 - 0.5 && u.y < h as f64 - 0.5) {
        return None;
    }
    let u = Pixel::new(u.x.clamp(0.0, (w - 1) as f64), u.y.clamp(0.0, (h - 1) as f64));
    let nearest_col = (u.x.round() as usize).min(w - 1);
    let nearest_row = (u.y.round() as usize).min(h - 1);
    if bundle.depth(view, nearest_row, nearest_col) <= 0.0 {
        return None;
    }
    let x0 = u.x.floor() as usize;
    let y0 = u.y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = u.x - x0 as f64;
    let fy = u.y - y0 as f64;
    let taps = [
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    ];
    let mut total = 0.0;
    let mut depth = 0.0;
    let mut color = [0.0; 3];
    let mut confidence = 0.0;
    for (row, col, wgt) in taps {
        if wgt <= 0.0 {
            continue;
        }
        let d = bundle.depth(view, row, col) as f64;
        if d <= 0.0 {
            continue;
        }
        total += wgt;
        depth += wgt * d;
        let c = bundle.color(view, row, col);
        for k in 0..3 {
            color[k] += wgt * c[k] as f64;
        }
        confidence += wgt * conf.get(row, col);
    }
    if total <= 0.0 {
        // u sits exactly on the nearest pixel, which is valid
        let c = bundle.color(view, nearest_row, nearest_col);
        return Some(Sample {
            depth: bundle.depth(view, nearest_row, nearest_col) as f64,
            color: c.map(|v| v as f64),
            confidence: conf.get(nearest_row, nearest_col),
        });
    }
    Some(Sample {
        depth: depth / total,
        color: color.map(|v| v / total),
        confidence: confidence / total,
    })
}

/// Reprojects a world point with color `color` into every view, in view
/// order.
pub fn gather_projections(
    position: &Vector3<f64>,
    color: [f64; 3],
    bundle: &SceneBundle,
    conf: &[ConfidenceMap],
    occlusion_tolerance: f64,
) -> Vec<ProjectionRecord> {
    (0..bundle.frames())
        .map(|view| {
            let cam = &bundle.cameras[view];
            let y = cam.world_to_camera(position);
            let mut rec = ProjectionRecord {
                view,
                pixel: Pixel::zeros(),
                projected_depth: y.z,
                sampled_depth: 0.0,
                projected_color: color,
                sampled_color: [0.0; 3],
                confidence: 1.0,
                visible: false,
            };
            if y.z <= MIN_DEPTH {
                return rec;
            }
            rec.pixel = cam.intrinsics.project(&y);
            if let Some(s) = sample_view(bundle, &conf[view], view, &rec.pixel) {
                rec.sampled_depth = s.depth;
                rec.sampled_color = s.color;
                rec.confidence = s.confidence;
                rec.visible = y.z <= s.depth + occlusion_tolerance * y.z;
            }
            rec
        })
        .collect()
}

/// Color of the pixel a cloud point was lifted from.
pub fn source_color(bundle: &SceneBundle, p: &CloudPoint) -> [f64; 3] {
    bundle.color(p.frame, p.row, p.col).map(|v| v as f64)
}

/// Heteroscedastic negative log-likelihood
/// `sum [ r^2 / (2 sigma^2) + 0.5 ln sigma^2 ]` over `(residual, variance)`
/// pairs.
pub fn gaussian_nll<I: IntoIterator<Item = (f64, f64)>>(observations: I) -> f64 {
    observations
        .into_iter()
        .map(|(r, var)| r * r / (2.0 * var) + 0.5 * var.ln())
        .sum()
}

/// Depth negative log-likelihood over the visible records, with variances
/// derived from confidence.
pub fn mle_loss(records: &[ProjectionRecord]) -> Result<f64, ScoreError> {
    let visible: Vec<_> = records.iter().filter(|r| r.visible).collect();
    if visible.is_empty() {
        return Err(ScoreError::NoVisibleViews);
    }
    Ok(gaussian_nll(visible.iter().map(|r| {
        let obs = DepthObservation::from_confidence(r.sampled_depth, r.confidence);
        (r.depth_residual(), obs.variance)
    })))
}

/// Confidence-weighted dynamic score over the visible records.
pub fn dynamic_score(
    records: &[ProjectionRecord],
    lambda: f64,
    weighting: Weighting,
) -> Result<f64, ScoreError> {
    let visible: Vec<_> = records.iter().filter(|r| r.visible).collect();
    if visible.is_empty() {
        return Err(ScoreError::NoVisibleViews);
    }
    let weight = |r: &ProjectionRecord| match weighting {
        Weighting::Confidence => r.confidence,
        Weighting::Uniform => 1.0,
    };
    let total: f64 = visible.iter().map(|r| weight(r)).sum();
    Ok(visible
        .iter()
        .map(|r| {
            let residual = r.depth_residual().abs() + lambda * r.color_residual();
            weight(r) / total * residual
        })
        .sum())
}

/// Score of one cloud point, `None` when no view sees it.
pub fn score_point(
    p: &CloudPoint,
    bundle: &SceneBundle,
    conf: &[ConfidenceMap],
    params: &ScoreParams,
) -> Option<f64> {
    let records = gather_projections(
        &p.position,
        source_color(bundle, p),
        bundle,
        conf,
        params.occlusion_tolerance,
    );
    dynamic_score(&records, params.lambda, params.weighting).ok()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub masks: MaskStack,
    /// Score per cloud point; `None` for dead or unseen points.
    pub scores: Vec<Option<f64>>,
    /// Cloud with points below the dynamic threshold marked dead.
    pub cloud: DynamicPointCloud,
}

/// Keeps alive points with `S_dyn >= theta_dyn` (unseen points keep their
/// verdict), rasterizes them and closes each frame with a 3x3 element.
pub fn refine_masks(
    cloud: &DynamicPointCloud,
    bundle: &SceneBundle,
    conf: &[ConfidenceMap],
    params: &ScoreParams,
) -> Refinement {
    let scores: Vec<Option<f64>> = cloud
        .points
        .par_iter()
        .map(|p| {
            if p.alive {
                score_point(p, bundle, conf, params)
            } else {
                None
            }
        })
        .collect();
    let mut refined = cloud.clone();
    for (p, s) in refined.points.iter_mut().zip(&scores) {
        if let (true, Some(s)) = (p.alive, s) {
            p.alive = *s >= params.theta_dyn;
        }
    }
    let mut frames = vec![Mask::new(bundle.height, bundle.width); bundle.frames()];
    for p in refined.points.iter().filter(|p| p.alive) {
        frames[p.frame].set(p.row, p.col, true);
    }
    let frames = frames.iter().map(Mask::close3).collect();
    Refinement {
        masks: MaskStack::new(frames).expect("uniform dims"),
        scores,
        cloud: refined,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraModel, Intrinsics};
    use nalgebra::Matrix3;
    use proptest::prelude::*;

    fn record(residual: f64, color_residual: f64, confidence: f64) -> ProjectionRecord {
        ProjectionRecord {
            view: 0,
            pixel: Pixel::zeros(),
            projected_depth: 2.0 + residual,
            sampled_depth: 2.0,
            projected_color: [0.5 + color_residual; 3],
            sampled_color: [0.5; 3],
            confidence,
            visible: true,
        }
    }

    #[test]
    fn activation_values() {
        assert_eq!(confidence_from_logit(0.0), 2.0);
        let low = confidence_excess(-40.0);
        assert!(low > 0.0 && low < 1e-17);
        assert!((confidence_from_logit(3f64.ln()) - 4.0).abs() < 1e-12);
        assert_eq!(confidence_from_logit(1e6), confidence_from_logit(40.0));
        let t = TensorMap::new(vec![1, 2], vec![0.0, -1000.0]).unwrap();
        let m = activate_confidence(&t);
        assert!(m.excess.iter().all(|&e| e > 0.0 && e.is_finite()));
    }

    #[test]
    fn logit_for_sigma_inverts_variance_mapping() {
        let sigma: f64 = 0.03;
        let c = confidence_from_logit(logit_for_sigma(sigma));
        assert!((variance_from_confidence(c) - sigma * sigma).abs() < 1e-12);
    }

    #[test]
    fn nll_hand_values() {
        assert_eq!(gaussian_nll([(0.0, 1.0)]), 0.0);
        assert_eq!(gaussian_nll([(1.0, 1.0)]), 0.5);
        // C = 2 gives sigma^2 = 1 / (1 + 1e-12)
        let l = mle_loss(&[record(1.0, 0.0, 2.0)]).unwrap();
        assert!((l - 0.5).abs() < 1e-11);
        let mut hidden = record(0.0, 0.0, 2.0);
        hidden.visible = false;
        assert_eq!(mle_loss(&[hidden]), Err(ScoreError::NoVisibleViews));
    }

    #[test]
    fn nll_minimizer_is_squared_residual() {
        // dL/dv = -r^2 / (2 v^2) + 1 / (2 v) vanishes at v = r^2
        for r in [0.05, 0.3, 1.7] {
            let v0 = r * r;
            let h = 1e-5 * v0;
            let grad = (gaussian_nll([(r, v0 + h)]) - gaussian_nll([(r, v0 - h)])) / (2.0 * h);
            assert!(grad.abs() <= 1e-3 * (0.5 / v0), "grad {grad} at r {r}");
            // and it is a minimum
            assert!(gaussian_nll([(r, v0 * 1.1)]) > gaussian_nll([(r, v0)]));
            assert!(gaussian_nll([(r, v0 * 0.9)]) > gaussian_nll([(r, v0)]));
        }
    }

    #[test]
    fn score_hand_values() {
        assert_eq!(dynamic_score(&[record(0.0, 0.0, 5.0)], DEFAULT_LAMBDA, Weighting::Confidence).unwrap(), 0.0);
        let s = dynamic_score(&[record(0.2, 0.0, 17.0)], DEFAULT_LAMBDA, Weighting::Confidence).unwrap();
        assert!((s - 0.2).abs() < 1e-12);

        // residuals (1, 0) with confidences (1 + e^0, 1 + e^4)
        let c1 = 2.0;
        let c2 = 1.0 + 4f64.exp();
        let expected = c1 / (c1 + c2) * 1.0;
        let s = dynamic_score(
            &[record(1.0, 0.0, confidence_from_logit(0.0)), record(0.0, 0.0, confidence_from_logit(4.0))],
            DEFAULT_LAMBDA,
            Weighting::Confidence,
        )
        .unwrap();
        assert!((s - expected).abs() < 1e-12);
        assert!(s < 0.05);

        // the color term is the channel mean scaled by lambda
        let s = dynamic_score(&[record(0.0, 0.3, 2.0)], 1.0 / 3.0, Weighting::Confidence).unwrap();
        assert!((s - 0.1).abs() < 1e-12);
    }

    #[test]
    fn uniform_confidence_gives_plain_mean() {
        let recs = [record(0.1, 0.0, 3.0), record(0.5, 0.0, 3.0), record(0.3, 0.0, 3.0)];
        let s = dynamic_score(&recs, 0.0, Weighting::Confidence).unwrap();
        assert!((s - 0.3).abs() < 1e-12);
        let recs = [record(0.1, 0.0, 3.0), record(0.5, 0.0, 30.0)];
        assert!((dynamic_score(&recs, 0.0, Weighting::Uniform).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn empty_visibility_is_error() {
        assert_eq!(dynamic_score(&[], DEFAULT_LAMBDA, Weighting::Confidence), Err(ScoreError::NoVisibleViews));
    }

    fn two_view_bundle() -> SceneBundle {
        let (h, w) = (16, 16);
        let k = Intrinsics::new(16.0, 16.0, 7.5, 7.5);
        let cams = vec![
            CameraModel::new(k, Matrix3::identity(), Vector3::zeros()).unwrap(),
            CameraModel::new(k, Matrix3::identity(), Vector3::new(-0.2, 0.0, 0.0)).unwrap(),
        ];
        let plane = 4.0f32;
        SceneBundle {
            height: h,
            width: w,
            heads: 1,
            patch: 4,
            images: vec![TensorMap::new(vec![h, w, 3], vec![0.4; h * w * 3]).unwrap(); 2],
            depths: vec![TensorMap::new(vec![h, w], vec![plane; h * w]).unwrap(); 2],
            confidence_logits: vec![TensorMap::zeros(vec![h, w]).unwrap(); 2],
            attention: vec![TensorMap::zeros(vec![1, 4, 4]).unwrap(); 2],
            cameras: cams,
            gt_masks: None,
            gt_cameras: None,
        }
    }

    #[test]
    fn own_view_round_trip_and_occlusion() {
        let b = two_view_bundle();
        let conf = activate_all(&b);
        let px = Pixel::new(5.0, 9.0);
        let x = b.cameras[0].unproject(&px, 4.0);
        let recs = gather_projections(&x, [0.4; 3], &b, &conf, DEFAULT_OCCLUSION_TOLERANCE);
        assert!(recs[0].visible);
        assert!((recs[0].pixel - px).norm() <= 1e-4);
        assert!(recs[0].depth_residual().abs() <= 1e-4);
        // static plane: second view agrees too
        assert!(recs[1].visible && recs[1].depth_residual().abs() < 1e-4);

        // a point far behind the plane is occluded everywhere
        let behind = b.cameras[0].unproject(&px, 6.0);
        let recs = gather_projections(&behind, [0.4; 3], &b, &conf, DEFAULT_OCCLUSION_TOLERANCE);
        assert!(recs.iter().all(|r| !r.visible));

        // behind every camera
        let recs = gather_projections(&Vector3::new(0.0, 0.0, -1.0), [0.4; 3], &b, &conf, 0.05);
        assert!(recs.iter().all(|r| !r.visible));
    }

    #[test]
    fn invalid_nearest_depth_hides_view() {
        let mut b = two_view_bundle();
        b.depths[0].data_mut()[9 * 16 + 5] = 0.0;
        let conf = activate_all(&b);
        let x = b.cameras[0].unproject(&Pixel::new(5.0, 9.0), 4.0);
        let recs = gather_projections(&x, [0.4; 3], &b, &conf, 0.05);
        assert!(!recs[0].visible);
        assert!(recs[1].visible);
    }

    #[test]
    fn refine_threshold_zero_keeps_all() {
        let b = two_view_bundle();
        let conf = activate_all(&b);
        let masks = MaskStack::new(vec![Mask::from_fn(16, 16, |r, c| (4..8).contains(&r) && (4..8).contains(&c)), Mask::new(16, 16)]).unwrap();
        let cloud = crate::purify::unproject_mask(&b, &masks, None);
        let params = ScoreParams { theta_dyn: 0.0, ..ScoreParams::default() };
        let out = refine_masks(&cloud, &b, &conf, &params);
        assert_eq!(out.cloud.alive_count(), cloud.len());
        // static plane points are all consistent and get dropped at the default threshold
        let out = refine_masks(&cloud, &b, &conf, &ScoreParams::default());
        assert_eq!(out.cloud.alive_count(), 0);
        assert_eq!(out.masks.count(), 0);
    }

    proptest! {
        #[test]
        fn score_properties(
            recs in prop::collection::vec((0.0f64..2.0, 0.0f64..0.5, 1.0001f64..100.0), 1..6),
            scale in 0.01f64..100.0,
            bump in 0.0f64..1.0,
            which in 0usize..6,
        ) {
            let records: Vec<_> = recs.iter().map(|&(r, c, w)| record(r, c, w)).collect();
            let s = dynamic_score(&records, DEFAULT_LAMBDA, Weighting::Confidence).unwrap();
            prop_assert!(s >= 0.0);

            let scaled: Vec<_> = records.iter().map(|r| ProjectionRecord { confidence: r.confidence * scale, ..*r }).collect();
            let s2 = dynamic_score(&scaled, DEFAULT_LAMBDA, Weighting::Confidence).unwrap();
            prop_assert!((s - s2).abs() <= 1e-9);

            let i = which % records.len();
            let mut bumped = records.clone();
            bumped[i].projected_depth += bump;
            let s3 = dynamic_score(&bumped, DEFAULT_LAMBDA, Weighting::Confidence).unwrap();
            prop_assert!(s3 >= s - 1e-12);
        }

        #[test]
        fn higher_confidence_gets_higher_weight(r in 0.01f64..1.0, ca in 1.5f64..50.0, cb_frac in 0.01f64..0.99) {
            let cb = 1.0 + (ca - 1.0) * cb_frac;
            // isolate each view's contribution by zeroing the other residual
            let a_only = dynamic_score(&[record(r, 0.0, ca), record(0.0, 0.0, cb)], 0.0, Weighting::Confidence).unwrap();
            let b_only = dynamic_score(&[record(0.0, 0.0, ca), record(r, 0.0, cb)], 0.0, Weighting::Confidence).unwrap();
            prop_assert!(a_only > b_only);
        }

        #[test]
        fn zero_score_iff_zero_residuals(recs in prop::collection::vec((0.0f64..1.0, 1.5f64..9.0), 1..5)) {
            let records: Vec<_> = recs.iter().map(|&(r, w)| record(r, 0.0, w)).collect();
            let s = dynamic_score(&records, DEFAULT_LAMBDA, Weighting::Confidence).unwrap();
            let all_zero = recs.iter().all(|&(r, _)| r == 0.0);
            prop_assert_eq!(s == 0.0, all_zero);
        }
    }
}

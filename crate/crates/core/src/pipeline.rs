//! End-to-end composition: aggregate, binarize, unproject, purify, refine.
//! Also the epipolar residual analysis over ground truth and the metric
//! report for a set of predicted masks.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{self, HeadStack, SaliencyMap, DEFAULT_EPS, DEFAULT_THETA};
use crate::consistency::{
    activate_all, refine_masks, ScoreParams, Weighting, DEFAULT_LAMBDA, DEFAULT_OCCLUSION_TOLERANCE,
    DEFAULT_THETA_DYN,
};
use crate::eval::{self, EvalError, MetricReport, DEFAULT_BOUNDARY_TOL};
use crate::geometry::{EssentialMatrix, GeometryError, Pixel, RelativePose, MIN_DEPTH};
use crate::mask::MaskStack;
use crate::purify::{
    mask_from_cloud, purify_with_radius, scene_diagonal, unproject_mask, DynamicPointCloud,
    DEFAULT_R_FACTOR, DEFAULT_TAU,
};
use crate::scene::SceneBundle;
use crate::synth::GroundTruth;
use crate::tensor::TensorMap;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{name} = {value} is outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
}

/// Enables each of the three mechanisms independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    /// Variance-weighted head fusion; off means uniform head averaging.
    pub attention_weighting: bool,
    /// Radius-support filtering of the dynamic cloud.
    pub purification: bool,
    /// Confidence-weighted cross-view refinement.
    pub uncertainty: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            attention_weighting: true,
            purification: true,
            uncertainty: true,
        }
    }
}

impl StageToggles {
    pub const BASELINE: Self = Self {
        attention_weighting: false,
        purification: false,
        uncertainty: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Stabilizer in the head weight denominator.
    pub eps: f64,
    /// Saliency threshold for the coarse mask.
    pub theta_saliency: f64,
    /// Support radius as a fraction of the dynamic cloud diagonal.
    pub r_factor: f64,
    /// Minimum neighbour count for a point to survive purification.
    pub tau: usize,
    /// Weight of the color residual in the dynamic score.
    pub lambda: f64,
    /// Points scoring at least this are dynamic.
    pub theta_dyn: f64,
    /// Occlusion slack as a fraction of the projected depth.
    pub occlusion_tolerance: f64,
    /// Boundary match tolerance as a fraction of the image diagonal.
    pub boundary_tol_frac: f64,
    /// Fixed diagonal for the support radius. `None` measures the dynamic cloud.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene_diagonal: Option<f64>,
    pub stages: StageToggles,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            theta_saliency: DEFAULT_THETA,
            r_factor: DEFAULT_R_FACTOR,
            tau: DEFAULT_TAU,
            lambda: DEFAULT_LAMBDA,
            theta_dyn: DEFAULT_THETA_DYN,
            occlusion_tolerance: DEFAULT_OCCLUSION_TOLERANCE,
            boundary_tol_frac: DEFAULT_BOUNDARY_TOL,
            scene_diagonal: None,
            stages: StageToggles::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |name, value: f64, ok: bool, range| {
            if ok && value.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange { name, value, range })
            }
        };
        check("eps", self.eps, self.eps > 0.0, "(0, inf)")?;
        check(
            "theta_saliency",
            self.theta_saliency,
            (0.0..=1.0).contains(&self.theta_saliency),
            "[0, 1]",
        )?;
        check("r_factor", self.r_factor, self.r_factor >= 0.0, "[0, inf)")?;
        check("lambda", self.lambda, self.lambda >= 0.0, "[0, inf)")?;
        check("theta_dyn", self.theta_dyn, self.theta_dyn >= 0.0, "[0, inf)")?;
        check(
            "occlusion_tolerance",
            self.occlusion_tolerance,
            self.occlusion_tolerance >= 0.0,
            "[0, inf)",
        )?;
        check(
            "boundary_tol_frac",
            self.boundary_tol_frac,
            (0.0..=1.0).contains(&self.boundary_tol_frac),
            "[0, 1]",
        )?;
        if let Some(d) = self.scene_diagonal {
            check("scene_diagonal", d, d > 0.0, "(0, inf)")?;
        }
        Ok(())
    }

    pub fn score_params(&self) -> ScoreParams {
        ScoreParams {
            lambda: self.lambda,
            occlusion_tolerance: self.occlusion_tolerance,
            theta_dyn: self.theta_dyn,
            weighting: Weighting::Confidence,
        }
    }
}

/// Point counts and parameters recorded in `pipeline.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub unprojected_points: usize,
    pub purified_points: Option<usize>,
    pub refined_points: Option<usize>,
    pub scene_diagonal: f64,
    pub support_radius: Option<f64>,
    pub coarse_mask_pixels: Vec<usize>,
    pub final_mask_pixels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub saliency: Vec<SaliencyMap>,
    pub coarse: MaskStack,
    /// Unprojected coarse mask with every point's final verdict.
    pub cloud: DynamicPointCloud,
    pub masks: MaskStack,
    pub stats: StageStats,
}

/// Per-frame saliency with variance weighting or plain averaging.
pub fn saliency_maps(bundle: &SceneBundle, weighted: bool, eps: f64) -> Vec<SaliencyMap> {
    bundle
        .attention
        .iter()
        .enumerate()
        .map(|(f, t)| {
            let stack = HeadStack::from_tensor(f, t);
            if weighted {
                attention::aggregate(&stack, eps)
            } else {
                attention::aggregate_uniform(&stack)
            }
        })
        .collect()
}

pub fn coarse_masks(saliency: &[SaliencyMap], theta: f64, patch: usize) -> MaskStack {
    MaskStack::new(saliency.iter().map(|s| attention::binarize(s, theta, patch)).collect())
        .expect("uniform dims")
}

/// Runs the enabled stages in order. With every stage disabled the output is
/// the binarized uniform-average saliency.
pub fn run(bundle: &SceneBundle, config: &PipelineConfig) -> PipelineOutput {
    let stages = config.stages;
    let saliency = saliency_maps(bundle, stages.attention_weighting, config.eps);
    let coarse = coarse_masks(&saliency, config.theta_saliency, bundle.patch);
    let cloud = unproject_mask(bundle, &coarse, Some(&saliency));
    let (t, h, w) = (bundle.frames(), bundle.height, bundle.width);
    let diagonal = config.scene_diagonal.unwrap_or_else(|| scene_diagonal(&cloud));
    let mut stats = StageStats {
        unprojected_points: cloud.len(),
        purified_points: None,
        refined_points: None,
        scene_diagonal: diagonal,
        support_radius: None,
        coarse_mask_pixels: coarse.frames().iter().map(|m| m.count()).collect(),
        final_mask_pixels: Vec::new(),
    };
    let cloud = if stages.purification {
        let r = config.r_factor * diagonal;
        let purified = purify_with_radius(&cloud, config.tau, r);
        stats.support_radius = Some(r);
        stats.purified_points = Some(purified.alive_count());
        purified
    } else {
        cloud
    };
    let (cloud, masks) = if stages.uncertainty {
        let conf = activate_all(bundle);
        let refined = refine_masks(&cloud, bundle, &conf, &config.score_params());
        stats.refined_points = Some(refined.cloud.alive_count());
        (refined.cloud, refined.masks)
    } else if stages.purification {
        let masks = mask_from_cloud(&cloud, t, h, w);
        (cloud, masks)
    } else {
        (cloud, coarse.clone())
    };
    stats.final_mask_pixels = masks.frames().iter().map(|m| m.count()).collect();
    PipelineOutput {
        saliency,
        coarse,
        cloud,
        masks,
        stats,
    }
}

/// Contents of `pipeline.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub frames: usize,
    pub stats: StageStats,
    pub head_weights: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_ms: Option<f64>,
}

impl PipelineReport {
    pub fn new(config: &PipelineConfig, out: &PipelineOutput) -> Self {
        Self {
            config: *config,
            frames: out.masks.len(),
            stats: out.stats.clone(),
            head_weights: out.saliency.iter().map(|s| s.head_weights.clone()).collect(),
            timing_ms: None,
        }
    }
}

/// Residual statistics for one frame pair. Medians are `None` when the
/// class has no pixels or the pair has no baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualPair {
    pub reference: usize,
    pub target: usize,
    pub degenerate: bool,
    pub mover_pixels: usize,
    pub background_pixels: usize,
    pub mover_median: Option<f64>,
    pub background_median: Option<f64>,
    pub background_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub pairs: Vec<ResidualPair>,
    pub mover_median: Option<f64>,
    pub background_median: Option<f64>,
    pub background_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualAnalysis {
    /// `|delta|` per reference pixel for each consecutive pair, H x W.
    pub maps: Vec<TensorMap>,
    pub summary: ResidualSummary,
}

/// Epipolar residual magnitudes between consecutive frames using true depth
/// and poses. Background pixels are reprojected rigidly; mover pixels are
/// additionally displaced by their mover's true motion.
pub fn epipolar_residuals(truth: &GroundTruth) -> ResidualAnalysis {
    let t = truth.frames();
    let (h, w) = (truth.true_depths[0].dims()[0], truth.true_depths[0].dims()[1]);
    let mut maps = Vec::new();
    let mut pairs = Vec::new();
    let mut all_mover = Vec::new();
    let mut all_background = Vec::new();
    for r in 0..t.saturating_sub(1) {
        let target = r + 1;
        let (cr, ct) = (&truth.cameras[r], &truth.cameras[target]);
        let rel = RelativePose::between(cr, ct);
        let mut map = vec![0.0f64; h * w];
        let mut mover = Vec::new();
        let mut background = Vec::new();
        let essential = match EssentialMatrix::from_relative(&rel) {
            Ok(e) => Some(e),
            Err(GeometryError::ZeroBaseline) => None,
            Err(e) => panic!("relative pose: {e}"),
        };
        if let Some(e) = &essential {
            for row in 0..h {
                for col in 0..w {
                    let label = truth.label(r, row, col);
                    let depth = truth.true_depth(r, row, col);
                    if label < 0 || depth <= 0.0 {
                        continue;
                    }
                    let xhat_r = cr.intrinsics.normalize(&Pixel::new(col as f64, row as f64));
                    let mut y = rel.apply(&(xhat_r * depth));
                    if label > 0 {
                        let k = (label - 1) as usize;
                        y += ct.rotation * truth.mover_displacement(k, r, target);
                    }
                    if y.z <= MIN_DEPTH {
                        continue;
                    }
                    let xhat_t: Vector3<f64> = y / y.z;
                    let delta = xhat_t.dot(&(e.matrix * xhat_r)).abs();
                    map[row * w + col] = delta;
                    if label > 0 {
                        mover.push(delta);
                    } else {
                        background.push(delta);
                    }
                }
            }
        }
        let stat = |v: &[f64]| (!v.is_empty()).then(|| eval::median(v));
        pairs.push(ResidualPair {
            reference: r,
            target,
            degenerate: essential.is_none(),
            mover_pixels: mover.len(),
            background_pixels: background.len(),
            mover_median: stat(&mover),
            background_median: stat(&background),
            background_max: (!background.is_empty()).then(|| background.iter().cloned().fold(0.0, f64::max)),
        });
        maps.push(TensorMap::from_f64(vec![h, w], &map).expect("residual dims"));
        all_mover.extend(mover);
        all_background.extend(background);
    }
    let stat = |v: &[f64]| (!v.is_empty()).then(|| eval::median(v));
    ResidualAnalysis {
        maps,
        summary: ResidualSummary {
            pairs,
            mover_median: stat(&all_mover),
            background_median: stat(&all_background),
            background_max: (!all_background.is_empty())
                .then(|| all_background.iter().cloned().fold(0.0, f64::max)),
        },
    }
}

/// World points of every set pixel with valid depth.
pub fn mask_points(
    masks: &MaskStack,
    cameras: &[crate::geometry::CameraModel],
    depth: impl Fn(usize, usize, usize) -> f64,
) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for (f, m) in masks.frames().iter().enumerate() {
        for row in 0..m.height() {
            for col in 0..m.width() {
                if m.get(row, col) {
                    let d = depth(f, row, col);
                    if d > 0.0 {
                        out.push(cameras[f].unproject(&Pixel::new(col as f64, row as f64), d));
                    }
                }
            }
        }
    }
    out
}

/// Metric report for predicted masks. Segmentation needs `gt_masks`, ATE
/// needs `gt_cameras`, and cloud metrics need the true depths in `truth`;
/// missing inputs leave the corresponding fields empty.
pub fn evaluate(
    pred: &MaskStack,
    bundle: &SceneBundle,
    truth: Option<&GroundTruth>,
    tol_frac: f64,
) -> Result<MetricReport, EvalError> {
    let mut report = MetricReport::empty(pred.len());
    if let Some(gt) = &bundle.gt_masks {
        report.set_segmentation(eval::segmentation_report(pred, gt, tol_frac)?);
    }
    if let Some(gt_cams) = &bundle.gt_cameras {
        match eval::ate(&bundle.cameras, gt_cams) {
            Ok(v) => report.ate = Some(v),
            Err(EvalError::TooShort(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if let Some(truth) = truth {
        pred.check_compatible(&truth.masks)?;
        let predicted = mask_points(pred, &bundle.cameras, |f, r, c| bundle.depth(f, r, c) as f64);
        let reference = mask_points(&truth.masks, &truth.cameras, |f, r, c| truth.true_depth(f, r, c));
        if !predicted.is_empty() && !reference.is_empty() {
            report.set_cloud(eval::cloud_metrics(&predicted, &reference)?);
        }
    }
    Ok(report)
}

//! Segmentation, trajectory and reconstruction metrics.
//!
//! JM/FM follow the DAVIS conventions: per-frame Jaccard and boundary
//! F-measure averaged over frames, with JR/FR the fraction of frames scoring
//! above 0.5. ATE is the RMSE of camera centers after a closed-form
//! similarity alignment. Cloud metrics are nearest-neighbour distances in
//! both directions.

use rayon::prelude::*;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CameraModel;
use crate::mask::{Mask, MaskError, MaskStack};
use crate::spatial::NearestTree;

/// Boundary match tolerance as a fraction of the image diagonal.
pub const DEFAULT_BOUNDARY_TOL: f64 = 0.008;
/// JR/FR count frames whose score exceeds this.
pub const RECALL_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("trajectory lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("trajectory needs at least 2 poses, got {0}")]
    TooShort(usize),
    #[error("point set is empty")]
    EmptyCloud,
}

/// Per-frame `|pred & gt| / |pred | gt|`, 1 for an empty union.
pub fn jaccard_per_frame(pred: &MaskStack, gt: &MaskStack) -> Result<Vec<f64>, EvalError> {
    pred.check_compatible(gt)?;
    Ok(pred
        .frames()
        .iter()
        .zip(gt.frames())
        .map(|(p, g)| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&a, &b) in p.data().iter().zip(g.data()) {
                inter += usize::from(a && b);
                union += usize::from(a || b);
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn jaccard_mean(pred: &MaskStack, gt: &MaskStack) -> Result<f64, EvalError> {
    Ok(mean(&jaccard_per_frame(pred, gt)?))
}

/// Foreground pixels with at least one 4-neighbour in the background;
/// pixels outside the image count as background.
pub fn boundary(mask: &Mask) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    Mask::from_fn(h, w, |r, c| {
        mask.get(r, c)
            && (r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1))
    })
}

/// Match radius in pixels, `ceil(tol_frac * diagonal)`.
pub fn boundary_radius(height: usize, width: usize, tol_frac: f64) -> usize {
    ((height as f64).hypot(width as f64) * tol_frac).ceil().max(0.0) as usize
}

/// `within(m, r)[p]` is set when some pixel of `m` lies within Euclidean
/// distance `r` of `p`.
fn within_radius(m: &Mask, radius: usize) -> Mask {
    let (h, w) = (m.height(), m.width());
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = Mask::new(h, w);
    for row in 0..h {
        for col in 0..w {
            if !m.get(row, col) {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (y, x) = (row as isize + dy, col as isize + dx);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    out.set(y as usize, x as usize, true);
                }
            }
        }
    }
    out
}

fn frame_boundary_f(pred: &Mask, gt: &Mask, radius: usize) -> f64 {
    let bp = boundary(pred);
    let bg = boundary(gt);
    let (np, ng) = (bp.count(), bg.count());
    if np == 0 && ng == 0 {
        return 1.0;
    }
    if np == 0 || ng == 0 {
        return 0.0;
    }
    let near_gt = within_radius(&bg, radius);
    let near_pred = within_radius(&bp, radius);
    let precision = bp.and(&near_gt).count() as f64 / np as f64;
    let recall = bg.and(&near_pred).count() as f64 / ng as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn boundary_f_per_frame(pred: &MaskStack, gt: &MaskStack, tol_frac: f64) -> Result<Vec<f64>, EvalError> {
    pred.check_compatible(gt)?;
    let Some((h, w)) = gt.dims() else {
        return Ok(Vec::new());
    };
    let radius = boundary_radius(h, w, tol_frac);
    Ok(pred
        .frames()
        .iter()
        .zip(gt.frames())
        .map(|(p, g)| frame_boundary_f(p, g, radius))
        .collect())
}

pub fn boundary_f(pred: &MaskStack, gt: &MaskStack, tol_frac: f64) -> Result<f64, EvalError> {
    Ok(mean(&boundary_f_per_frame(pred, gt, tol_frac)?))
}

/// Fraction of frames scoring strictly above 0.5.
pub fn recall_fraction(per_frame: &[f64]) -> f64 {
    if per_frame.is_empty() {
        return 0.0;
    }
    per_frame.iter().filter(|&&v| v > RECALL_THRESHOLD).count() as f64 / per_frame.len() as f64
}

/// Similarity transform `y = scale * R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

/// Least-squares similarity taking `src` onto `dst` (Umeyama). When all
/// source points coincide the rotation is the identity and the scale 1.
/// Identical inputs give the exact identity.
pub fn align_similarity(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Similarity {
    assert_eq!(src.len(), dst.len());
    if src == dst {
        return Similarity {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        };
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let var_s = src.iter().map(|s| (s - mu_s).norm_squared()).sum::<f64>() / n;
    // identical points up to rounding in the mean
    if var_s <= 1e-24 * mu_s.norm_squared().max(1.0) {
        return Similarity {
            rotation: Matrix3::identity(),
            translation: mu_d - mu_s,
            scale: 1.0,
        };
    }
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v");
    let mut signs = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        signs[(2, 2)] = -1.0;
    }
    let rotation = u * signs * v_t;
    let d = svd.singular_values;
    let trace = d[0] * signs[(0, 0)] + d[1] * signs[(1, 1)] + d[2] * signs[(2, 2)];
    let scale = trace / var_s;
    Similarity {
        rotation,
        translation: mu_d - scale * (rotation * mu_s),
        scale,
    }
}

/// RMSE between aligned predicted centers and ground-truth centers.
pub fn ate_centers(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.len() < 2 {
        return Err(EvalError::TooShort(pred.len()));
    }
    let s = align_similarity(pred, gt);
    let sq: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (s.apply(p) - g).norm_squared())
        .sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Absolute trajectory error over camera centers.
pub fn ate(pred: &[CameraModel], gt: &[CameraModel]) -> Result<f64, EvalError> {
    let p: Vec<_> = pred.iter().map(CameraModel::center).collect();
    let g: Vec<_> = gt.iter().map(CameraModel::center).collect();
    ate_centers(&p, &g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudMetrics {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub comp_mean: f64,
    pub comp_median: f64,
    pub dist_mean: f64,
    pub dist_median: f64,
}

/// Distance from every `from` point to its nearest `to` point.
pub fn nearest_distances(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Vec<f64> {
    let tree = NearestTree::new(to);
    from.par_iter().map(|q| tree.nearest_squared(q).sqrt()).collect()
}

/// Median with the two middle values averaged for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Accuracy (pred to gt), completeness (gt to pred) and their average.
pub fn cloud_metrics(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<CloudMetrics, EvalError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    let acc = nearest_distances(pred, gt);
    let comp = nearest_distances(gt, pred);
    let (acc_mean, acc_median) = (mean(&acc), median(&acc));
    let (comp_mean, comp_median) = (mean(&comp), median(&comp));
    Ok(CloudMetrics {
        acc_mean,
        acc_median,
        comp_mean,
        comp_median,
        dist_mean: (acc_mean + comp_mean) / 2.0,
        dist_median: (acc_median + comp_median) / 2.0,
    })
}

/// Segmentation scores with per-frame series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub jm: f64,
    pub fm: f64,
    pub jr: f64,
    pub fr: f64,
    pub jm_per_frame: Vec<f64>,
    pub fm_per_frame: Vec<f64>,
}

pub fn segmentation_report(pred: &MaskStack, gt: &MaskStack, tol_frac: f64) -> Result<SegmentationReport, EvalError> {
    let j = jaccard_per_frame(pred, gt)?;
    let f = boundary_f_per_frame(pred, gt, tol_frac)?;
    Ok(SegmentationReport {
        jm: mean(&j),
        fm: mean(&f),
        jr: recall_fraction(&j),
        fr: recall_fraction(&f),
        jm_per_frame: j,
        fm_per_frame: f,
    })
}

/// Contents of `report.json`. Fields are `None` when the inputs they need
/// are missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: usize,
    pub jm: Option<f64>,
    pub fm: Option<f64>,
    pub jr: Option<f64>,
    pub fr: Option<f64>,
    pub jm_per_frame: Option<Vec<f64>>,
    pub fm_per_frame: Option<Vec<f64>>,
    pub ate: Option<f64>,
    pub acc_mean: Option<f64>,
    pub acc_median: Option<f64>,
    pub comp_mean: Option<f64>,
    pub comp_median: Option<f64>,
    pub dist_mean: Option<f64>,
    pub dist_median: Option<f64>,
}

impl MetricReport {
    pub fn empty(frames: usize) -> Self {
        Self {
            frames,
            jm: None,
            fm: None,
            jr: None,
            fr: None,
            jm_per_frame: None,
            fm_per_frame: None,
            ate: None,
            acc_mean: None,
            acc_median: None,
            comp_mean: None,
            comp_median: None,
            dist_mean: None,
            dist_median: None,
        }
    }

    pub fn set_segmentation(&mut self, s: SegmentationReport) {
        self.jm = Some(s.jm);
        self.fm = Some(s.fm);
        self.jr = Some(s.jr);
        self.fr = Some(s.fr);
        self.jm_per_frame = Some(s.jm_per_frame);
        self.fm_per_frame = Some(s.fm_per_frame);
    }

    pub fn set_cloud(&mut self, c: CloudMetrics) {
        self.acc_mean = Some(c.acc_mean);
        self.acc_median = Some(c.acc_median);
        self.comp_mean = Some(c.comp_mean);
        self.comp_median = Some(c.comp_median);
        self.dist_mean = Some(c.dist_mean);
        self.dist_median = Some(c.dist_median);
    }
}

//! Procedural multi-view scenes with exact ground truth.
//!
//! A box room is ray-cast analytically together with rigidly translating
//! spheres and cubes. Depth noise, confidence logits and attention heads are
//! synthesized from seeded per-frame random streams (ChaCha8, stream id
//! derived from frame and purpose) so output bytes do not depend on thread
//! scheduling.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::logit_for_sigma;
use crate::fsutil::write_atomic;
use crate::geometry::{rotation_y, CameraModel, GeometryError, Intrinsics, Pixel};
use crate::mask::{Mask, MaskStack};
use crate::scene::{save_scene, CameraRecord, SceneBundle, SceneError};
use crate::tensor::{read_tensor, write_tensor, TensorError, TensorMap};

pub const GT_NAME: &str = "gt.json";
/// Smallest depth written for a valid pixel after noise.
pub const MIN_NOISY_DEPTH: f64 = 1e-3;

const STREAM_DEPTH: u64 = 1;
const STREAM_ATTENTION: u64 = 2;
const STREAM_HEAD_ORDER: u64 = 3;
const STREAM_CORRUPT: u64 = 4;
const STREAM_CORPUS: u64 = 5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("spec json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("tensor {file}: {source}")]
    Tensor { file: String, source: TensorError },
    #[error("camera {index}: {source}")]
    Camera { index: usize, source: GeometryError },
    #[error("ground truth: {0}")]
    GroundTruth(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn rng_for(seed: u64, frame: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((frame as u64) << 8) | purpose);
    rng
}

/// Axis-aligned room enclosing the cameras, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Room {
    /// Walls at `x = +-half_width`.
    pub half_width: f64,
    /// Floor and ceiling at `y = +-half_height`.
    pub half_height: f64,
    /// Back wall behind the cameras.
    pub near: f64,
    /// Far wall the cameras look at.
    pub far: f64,
}

impl Default for Room {
    fn default() -> Self {
        Self {
            half_width: 3.0,
            half_height: 2.0,
            near: -1.0,
            far: 8.0,
        }
    }
}

impl Room {
    fn contains(&self, p: &Vector3<f64>) -> bool {
        p.x.abs() < self.half_width
            && p.y.abs() < self.half_height
            && p.z > self.near
            && p.z < self.far
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Cube,
}

fn default_mover_color() -> [f64; 3] {
    [0.9, 0.25, 0.1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoverSpec {
    pub shape: Shape,
    /// Sphere radius or cube half-edge, meters.
    pub size: f64,
    /// Center at frame 0, world meters.
    pub start: [f64; 3],
    /// Displacement per frame, world meters.
    pub velocity: [f64; 3],
    #[serde(default = "default_mover_color")]
    pub color: [f64; 3],
}

impl MoverSpec {
    pub fn center(&self, frame: usize) -> Vector3<f64> {
        Vector3::from(self.start) + Vector3::from(self.velocity) * frame as f64
    }
}

/// World-to-camera pose, `R` row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CameraPath {
    /// Camera center `start + f * step`, yaw `f * yaw_step_deg` about +y,
    /// looking down +z at yaw 0.
    Linear {
        start: [f64; 3],
        step: [f64; 3],
        #[serde(default)]
        yaw_step_deg: f64,
    },
    Explicit { poses: Vec<PoseRecord> },
}

/// Image rectangle `[x0, y0, x1, y1]` in fractions of width and height,
/// shifted by `drift * frame`, with noise `sigma_scale` times the base sigma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisyRegion {
    pub rect: [f64; 4],
    #[serde(default)]
    pub drift: [f64; 2],
    #[serde(default = "default_sigma_scale")]
    pub sigma_scale: f64,
}

fn default_sigma_scale() -> f64 {
    10.0
}

impl NoisyRegion {
    fn contains(&self, frame: usize, x: f64, y: f64) -> bool {
        let dx = self.drift[0] * frame as f64;
        let dy = self.drift[1] * frame as f64;
        x >= self.rect[0] + dx && x < self.rect[2] + dx && y >= self.rect[1] + dy && y < self.rect[3] + dy
    }
}

/// Depth noise. Confidence logits follow `l = -2 ln sigma_local`, so that
/// `C - 1 = sigma_local^-2`; noise-free pixels get the clamp value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub depth_sigma: f64,
    #[serde(default)]
    pub noisy_regions: Vec<NoisyRegion>,
}

/// Synthetic attention heads at patch resolution. Signal heads respond with
/// `peak_gain` times the square root of the fraction of each patch covered
/// by movers, so partly covered patches still respond strongly; noise
/// heads are a per-head constant near `noise_level` plus uniform jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSpec {
    pub signal_heads: usize,
    pub noise_heads: usize,
    pub peak_gain: f64,
    pub noise_level: f64,
    pub jitter: f64,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        Self {
            signal_heads: 2,
            noise_heads: 6,
            peak_gain: 1.0,
            noise_level: 0.3,
            jitter: 0.15,
        }
    }
}

impl AttentionSpec {
    pub fn heads(&self) -> usize {
        self.signal_heads + self.noise_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Focal length in pixels; defaults to the image width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal: Option<f64>,
    #[serde(default)]
    pub room: Room,
    #[serde(default)]
    pub movers: Vec<MoverSpec>,
    pub camera_path: CameraPath,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub attention: AttentionSpec,
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl SceneSpec {
    pub fn from_json_slice(bytes: &[u8]) -> Result<Self, SynthError> {
        let spec: Self = serde_json::from_slice(bytes)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = self.focal.unwrap_or(self.width as f64);
        Intrinsics::new(
            f,
            f,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    pub fn cameras(&self) -> Result<Vec<CameraModel>, SynthError> {
        let k = self.intrinsics();
        match &self.camera_path {
            CameraPath::Linear {
                start,
                step,
                yaw_step_deg,
            } => (0..self.frames)
                .map(|f| {
                    let center = Vector3::from(*start) + Vector3::from(*step) * f as f64;
                    let r = rotation_y((yaw_step_deg * f as f64).to_radians()).transpose();
                    CameraModel::new(k, r, -(r * center))
                        .map_err(|source| SynthError::Camera { index: f, source })
                })
                .collect(),
            CameraPath::Explicit { poses } => poses
                .iter()
                .enumerate()
                .map(|(index, p)| {
                    CameraModel::new(k, Matrix3::from_row_slice(&p.r), Vector3::from(p.t))
                        .map_err(|source| SynthError::Camera { index, source })
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.frames));
        }
        if self.height == 0 || self.width == 0 || self.patch == 0 {
            return bad("image dims and patch must be positive".into());
        }
        if self.height > 4096 || self.width > 4096 || self.frames > 1024 {
            return bad("scene too large".into());
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!(
                "patch {} does not divide {}x{}",
                self.patch, self.height, self.width
            ));
        }
        if let Some(f) = self.focal {
            if !(f.is_finite() && f > 0.0) {
                return bad("focal must be positive".into());
            }
        }
        let room = &self.room;
        if !finite(&[room.half_width, room.half_height, room.near, room.far])
            || room.half_width <= 0.0
            || room.half_height <= 0.0
            || room.far <= room.near
        {
            return bad("room must have positive extent".into());
        }
        for (i, m) in self.movers.iter().enumerate() {
            if !(m.size.is_finite() && m.size > 0.0)
                || !finite(&m.start)
                || !finite(&m.velocity)
                || !finite(&m.color)
            {
                return bad(format!("mover {i} has invalid geometry"));
            }
            if m.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return bad(format!("mover {i} color outside [0, 1]"));
            }
        }
        if let CameraPath::Explicit { poses } = &self.camera_path {
            if poses.len() != self.frames {
                return bad(format!(
                    "camera path has {} poses for {} frames",
                    poses.len(),
                    self.frames
                ));
            }
        }
        let cams = self.cameras()?;
        for (i, c) in cams.iter().enumerate() {
            if !room.contains(&c.center()) {
                return bad(format!("camera {i} is outside the room"));
            }
        }
        let n = &self.noise;
        if !(n.depth_sigma.is_finite() && n.depth_sigma >= 0.0) {
            return bad("depth_sigma must be non-negative".into());
        }
        for r in &n.noisy_regions {
            if !finite(&r.rect) || !finite(&r.drift) || !(r.sigma_scale.is_finite() && r.sigma_scale >= 0.0) {
                return bad("invalid noisy region".into());
            }
        }
        let a = &self.attention;
        if a.heads() == 0 || a.heads() > 256 {
            return bad("attention needs between 1 and 256 heads".into());
        }
        if !finite(&[a.peak_gain, a.noise_level, a.jitter]) || a.jitter < 0.0 {
            return bad("invalid attention parameters".into());
        }
        Ok(())
    }

    /// Randomized scene used by the evaluation corpus: 160x160 pixels, patch
    /// 8, six frames, one or two movers, a drifting high-noise region and
    /// several distractor heads.
    pub fn corpus(seed: u64) -> Self {
        let mut rng = rng_for(seed, 0, STREAM_CORPUS);
        let movers = (0..rng.gen_range(1..=2usize))
            .map(|i| {
                let x: f64 = if i == 0 { rng.gen_range(-1.2..-0.6) } else { rng.gen_range(0.6..1.2) };
                let speed: f64 = rng.gen_range(0.3..0.4);
                MoverSpec {
                    shape: if rng.gen_bool(0.5) { Shape::Sphere } else { Shape::Cube },
                    size: rng.gen_range(0.3..0.45),
                    start: [x, rng.gen_range(-0.5..0.5), rng.gen_range(3.5..5.0)],
                    velocity: [
                        -x.signum() * speed,
                        rng.gen_range(-0.05..0.05),
                        rng.gen_range(-0.12..0.12),
                    ],
                    color: [rng.gen_range(0.6..1.0), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.4)],
                }
            })
            .collect();
        let camera_path = CameraPath::Linear {
            start: [rng.gen_range(-0.2..0.2), rng.gen_range(-0.1..0.1), 0.0],
            step: [
                rng.gen_range(0.03..0.06) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                rng.gen_range(-0.01..0.01),
                rng.gen_range(0.0..0.03),
            ],
            yaw_step_deg: rng.gen_range(-1.0..1.0),
        };
        let noisy_regions = (0..rng.gen_range(1..=2usize))
            .map(|_| {
                let w: f64 = rng.gen_range(0.25..0.35);
                let h: f64 = rng.gen_range(0.25..0.35);
                let x0 = rng.gen_range(0.0..1.0 - w);
                let y0 = rng.gen_range(0.0..1.0 - h);
                NoisyRegion {
                    rect: [x0, y0, x0 + w, y0 + h],
                    drift: [rng.gen_range(-0.12..0.12), rng.gen_range(-0.12..0.12)],
                    sigma_scale: 10.0,
                }
            })
            .collect();
        Self {
            seed,
            frames: 6,
            height: 160,
            width: 160,
            patch: 8,
            focal: Some(160.0),
            room: Room::default(),
            movers,
            camera_path,
            noise: NoiseSpec {
                depth_sigma: 0.03,
                noisy_regions,
            },
            attention: AttentionSpec {
                signal_heads: rng.gen_range(1..=2),
                noise_heads: rng.gen_range(5..=7),
                peak_gain: 1.0,
                noise_level: 0.3,
                jitter: 0.15,
            },
        }
    }
}

/// Ground truth for a generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub masks: MaskStack,
    pub cameras: Vec<CameraModel>,
    /// H x W per frame: 0 static, `k + 1` for mover `k`, -1 where no
    /// surface was hit.
    pub labels: Vec<TensorMap>,
    /// Noise-free H x W depth per frame.
    pub true_depths: Vec<TensorMap>,
    /// `mover_centers[frame][k]`, world meters.
    pub mover_centers: Vec<Vec<[f64; 3]>>,
}

impl GroundTruth {
    pub fn frames(&self) -> usize {
        self.cameras.len()
    }

    #[inline]
    pub fn label(&self, frame: usize, row: usize, col: usize) -> i32 {
        let w = self.labels[frame].dims()[1];
        self.labels[frame].data()[row * w + col] as i32
    }

    #[inline]
    pub fn true_depth(&self, frame: usize, row: usize, col: usize) -> f64 {
        let w = self.true_depths[frame].dims()[1];
        self.true_depths[frame].data()[row * w + col] as f64
    }

    /// World displacement of mover `k` between two frames.
    pub fn mover_displacement(&self, k: usize, from: usize, to: usize) -> Vector3<f64> {
        Vector3::from(self.mover_centers[to][k]) - Vector3::from(self.mover_centers[from][k])
    }
}

/// Contents of `gt.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthManifest {
    pub frames: usize,
    pub trajectory: Vec<CameraRecord>,
    pub mover_centers: Vec<Vec<[f64; 3]>>,
    pub true_depths: Vec<String>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub bundle: SceneBundle,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    depth: f64,
    point: Vector3<f64>,
    /// 0 for the room, `k + 1` for mover `k`.
    label: usize,
}

fn room_hit(o: &Vector3<f64>, d: &Vector3<f64>, room: &Room) -> Option<Hit> {
    let bounds = [
        (-room.half_width, room.half_width),
        (-room.half_height, room.half_height),
        (room.near, room.far),
    ];
    let mut best: Option<f64> = None;
    for (axis, &(lo, hi)) in bounds.iter().enumerate() {
        if d[axis] == 0.0 {
            continue;
        }
        let plane = if d[axis] > 0.0 { hi } else { lo };
        let s = (plane - o[axis]) / d[axis];
        if s > 0.0 && best.map_or(true, |b| s < b) {
            best = Some(s);
        }
    }
    best.map(|s| Hit {
        depth: s,
        point: o + d * s,
        label: 0,
    })
}

fn sphere_hit(o: &Vector3<f64>, d: &Vector3<f64>, center: &Vector3<f64>, radius: f64) -> Option<f64> {
    let oc = o - center;
    let a = d.norm_squared();
    let b = oc.dot(d);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let root = disc.sqrt();
    let s0 = (-b - root) / a;
    let s1 = (-b + root) / a;
    if s0 > 0.0 {
        Some(s0)
    } else if s1 > 0.0 {
        Some(s1)
    } else {
        None
    }
}

fn cube_hit(o: &Vector3<f64>, d: &Vector3<f64>, center: &Vector3<f64>, half: f64) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for axis in 0..3 {
        let lo = center[axis] - half;
        let hi = center[axis] + half;
        if d[axis] == 0.0 {
            if o[axis] < lo || o[axis] > hi {
                return None;
            }
            continue;
        }
        let a = (lo - o[axis]) / d[axis];
        let b = (hi - o[axis]) / d[axis];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    if t0 > t1 {
        return None;
    }
    if t0 > 0.0 {
        Some(t0)
    } else if t1 > 0.0 {
        Some(t1)
    } else {
        None
    }
}

/// Smooth solid texture in [0.05, 0.95], continuous across room edges.
fn wall_color(p: &Vector3<f64>) -> [f64; 3] {
    let mut c = [0.0; 3];
    for (k, ck) in c.iter_mut().enumerate() {
        let k = k as f64;
        *ck = 0.5
            + 0.25 * (1.7 * p.x + 1.1 * p.z + 0.9 * k).sin()
            + 0.2 * (1.3 * p.y - 0.8 * p.z - 0.7 * k).cos();
    }
    c
}

/// Stripes fixed to the mover's surface, modulating its base color.
fn mover_color(m: &MoverSpec, local: &Vector3<f64>) -> [f64; 3] {
    let stripe = 0.55 + 0.45 * (11.0 * local.x + 7.0 * local.y + 5.0 * local.z).sin();
    m.color.map(|c| c * stripe)
}

/// Casts the ray through subpixel `px` of `cam` at frame `frame`. The hit
/// distance along a ray with unit camera z is the camera depth.
fn cast(spec: &SceneSpec, cam: &CameraModel, frame: usize, px: &Pixel) -> Option<Hit> {
    let dir = cam.rotation.transpose() * cam.intrinsics.normalize(px);
    let origin = cam.center();
    let mut hit = room_hit(&origin, &dir, &spec.room)?;
    for (k, m) in spec.movers.iter().enumerate() {
        let c = m.center(frame);
        let s = match m.shape {
            Shape::Sphere => sphere_hit(&origin, &dir, &c, m.size),
            Shape::Cube => cube_hit(&origin, &dir, &c, m.size),
        };
        if let Some(s) = s {
            if s < hit.depth {
                hit = Hit {
                    depth: s,
                    point: origin + dir * s,
                    label: k + 1,
                };
            }
        }
    }
    Some(hit)
}

/// Noise-free camera depth seen through subpixel `px`, or `None` when the
/// ray escapes the room.
pub fn true_depth_at(spec: &SceneSpec, cam: &CameraModel, frame: usize, px: &Pixel) -> Option<f64> {
    cast(spec, cam, frame, px).map(|h| h.depth)
}

/// Mover index hit through subpixel `px`, if any.
pub fn mover_at(spec: &SceneSpec, cam: &CameraModel, frame: usize, px: &Pixel) -> Option<usize> {
    cast(spec, cam, frame, px).and_then(|h| h.label.checked_sub(1))
}

struct FrameRender {
    true_depth: Vec<f64>,
    label: Vec<i32>,
    color: Vec<f32>,
}

fn render(spec: &SceneSpec, cam: &CameraModel, frame: usize) -> FrameRender {
    let n = spec.height * spec.width;
    let mut out = FrameRender {
        true_depth: vec![0.0; n],
        label: vec![-1; n],
        color: vec![0.0; n * 3],
    };
    for row in 0..spec.height {
        for col in 0..spec.width {
            let i = row * spec.width + col;
            if let Some(hit) = cast(spec, cam, frame, &Pixel::new(col as f64, row as f64)) {
                out.true_depth[i] = hit.depth;
                out.label[i] = hit.label as i32;
                let c = match hit.label {
                    0 => wall_color(&hit.point),
                    k => mover_color(&spec.movers[k - 1], &(hit.point - spec.movers[k - 1].center(frame))),
                };
                for k in 0..3 {
                    out.color[3 * i + k] = c[k] as f32;
                }
            }
        }
    }
    out
}

fn local_sigma(spec: &SceneSpec, frame: usize, row: usize, col: usize) -> f64 {
    let x = (col as f64 + 0.5) / spec.width as f64;
    let y = (row as f64 + 0.5) / spec.height as f64;
    let scale = spec
        .noise
        .noisy_regions
        .iter()
        .filter(|r| r.contains(frame, x, y))
        .map(|r| r.sigma_scale)
        .fold(1.0, f64::max);
    spec.noise.depth_sigma * scale
}

/// Fraction of each patch covered by `mask`, row-major over patches.
pub fn patch_coverage(mask: &Mask, patch: usize) -> Vec<f64> {
    let ph = mask.height() / patch;
    let pw = mask.width() / patch;
    let area = (patch * patch) as f64;
    let mut cov = vec![0.0; ph * pw];
    for row in 0..ph * patch {
        for col in 0..pw * patch {
            if mask.get(row, col) {
                cov[(row / patch) * pw + col / patch] += 1.0;
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= area);
    cov
}

fn attention_stack(spec: &SceneSpec, frame: usize, mask: &Mask, order: &[usize]) -> Vec<f32> {
    let a = &spec.attention;
    let cells = (spec.height / spec.patch) * (spec.width / spec.patch);
    let coverage = patch_coverage(mask, spec.patch);
    let mut rng = rng_for(spec.seed, frame, STREAM_ATTENTION);
    let mut heads: Vec<Vec<f64>> = Vec::with_capacity(a.heads());
    for _ in 0..a.signal_heads {
        heads.push(coverage.iter().map(|c| a.peak_gain * c.sqrt()).collect());
    }
    for _ in 0..a.noise_heads {
        let level = a.noise_level * rng.gen_range(0.5..1.5);
        heads.push(
            (0..cells)
                .map(|_| level + if a.jitter > 0.0 { rng.gen_range(-a.jitter..=a.jitter) } else { 0.0 })
                .collect(),
        );
    }
    order
        .iter()
        .flat_map(|&h| heads[h].iter().map(|&v| v as f32))
        .collect()
}

/// Renders a complete bundle and its ground truth.
pub fn generate(spec: &SceneSpec) -> Result<Generated, SynthError> {
    spec.validate()?;
    let cameras = spec.cameras()?;
    let baseline = cameras
        .iter()
        .map(|c| (c.center() - cameras[0].center()).norm())
        .fold(0.0, f64::max);
    if baseline < crate::geometry::MIN_BASELINE {
        log::warn!("camera path has zero baseline; epipolar geometry is degenerate");
    }
    let (h, w) = (spec.height, spec.width);
    let mut order: Vec<usize> = (0..spec.attention.heads()).collect();
    order.shuffle(&mut rng_for(spec.seed, 0, STREAM_HEAD_ORDER));

    struct Frame {
        image: TensorMap,
        depth: TensorMap,
        logits: TensorMap,
        attention: TensorMap,
        mask: Mask,
        label: TensorMap,
        true_depth: TensorMap,
    }
    let frames: Vec<Frame> = (0..spec.frames)
        .into_par_iter()
        .map(|f| {
            let r = render(spec, &cameras[f], f);
            let mut rng = rng_for(spec.seed, f, STREAM_DEPTH);
            let mut depth = vec![0.0f32; h * w];
            let mut logits = vec![0.0f32; h * w];
            for row in 0..h {
                for col in 0..w {
                    let i = row * w + col;
                    let sigma = local_sigma(spec, f, row, col);
                    let z: f64 = rng.sample(StandardNormal);
                    if r.true_depth[i] > 0.0 {
                        depth[i] = (r.true_depth[i] + sigma * z).max(MIN_NOISY_DEPTH) as f32;
                    }
                    logits[i] = logit_for_sigma(sigma) as f32;
                }
            }
            let mask = Mask::from_fn(h, w, |row, col| r.label[row * w + col] > 0);
            let attention = attention_stack(spec, f, &mask, &order);
            let ph = h / spec.patch;
            let pw = w / spec.patch;
            Frame {
                image: TensorMap::new(vec![h, w, 3], r.color).expect("image dims"),
                depth: TensorMap::new(vec![h, w], depth).expect("depth dims"),
                logits: TensorMap::new(vec![h, w], logits).expect("logit dims"),
                attention: TensorMap::new(vec![spec.attention.heads(), ph, pw], attention)
                    .expect("attention dims"),
                mask,
                label: TensorMap::new(vec![h, w], r.label.iter().map(|&l| l as f32).collect())
                    .expect("label dims"),
                true_depth: TensorMap::from_f64(vec![h, w], &r.true_depth).expect("depth dims"),
            }
        })
        .collect();

    let mut images = Vec::new();
    let mut depths = Vec::new();
    let mut confidence_logits = Vec::new();
    let mut attention = Vec::new();
    let mut masks = Vec::new();
    let mut labels = Vec::new();
    let mut true_depths = Vec::new();
    for fr in frames {
        images.push(fr.image);
        depths.push(fr.depth);
        confidence_logits.push(fr.logits);
        attention.push(fr.attention);
        masks.push(fr.mask);
        labels.push(fr.label);
        true_depths.push(fr.true_depth);
    }
    let masks = MaskStack::new(masks).expect("uniform dims");
    let mover_centers = (0..spec.frames)
        .map(|f| spec.movers.iter().map(|m| m.center(f).into()).collect())
        .collect();
    let bundle = SceneBundle {
        height: h,
        width: w,
        heads: spec.attention.heads(),
        patch: spec.patch,
        images,
        depths,
        confidence_logits,
        attention,
        cameras: cameras.clone(),
        gt_masks: Some(masks.clone()),
        gt_cameras: Some(cameras.clone()),
    };
    bundle.validate()?;
    Ok(Generated {
        bundle,
        truth: GroundTruth {
            masks,
            cameras,
            labels,
            true_depths,
            mover_centers,
        },
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes the bundle (`scene.json` and tensors) plus `gt.json` with the
/// true depth and label tensors.
pub fn write_generated(g: &Generated, dir: &Path) -> Result<(), SynthError> {
    save_scene(&g.bundle, dir)?;
    let t = g.truth.frames();
    let manifest = GroundTruthManifest {
        frames: t,
        trajectory: g.truth.cameras.iter().map(CameraRecord::from_camera).collect(),
        mover_centers: g.truth.mover_centers.clone(),
        true_depths: (0..t).map(|f| format!("gt_depth_{f:03}.dmt")).collect(),
        labels: (0..t).map(|f| format!("gt_label_{f:03}.dmt")).collect(),
    };
    for f in 0..t {
        for (name, tensor) in [
            (&manifest.true_depths[f], &g.truth.true_depths[f]),
            (&manifest.labels[f], &g.truth.labels[f]),
        ] {
            write_tensor(tensor, &dir.join(name)).map_err(|source| SynthError::Tensor {
                file: name.clone(),
                source,
            })?;
        }
    }
    let path = dir.join(GT_NAME);
    write_atomic(&path, &serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&path))
}

/// Generates `spec` into `dir`.
pub fn generate_to_dir(spec: &SceneSpec, dir: &Path) -> Result<Generated, SynthError> {
    let g = generate(spec)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_generated(&g, dir)?;
    Ok(g)
}

fn check_relative(name: &str) -> Result<(), SynthError> {
    let p = Path::new(name);
    if name.is_empty()
        || p.is_absolute()
        || p.components().any(|c| !matches!(c, std::path::Component::Normal(_)))
    {
        return Err(SynthError::GroundTruth(format!("path {name:?} must stay inside the scene directory")));
    }
    Ok(())
}

/// Reads `gt.json` next to a bundle. Returns `Ok(None)` when the file does
/// not exist. Masks come from the bundle's `gt_masks`.
pub fn load_ground_truth(dir: &Path, bundle: &SceneBundle) -> Result<Option<GroundTruth>, SynthError> {
    let path = dir.join(GT_NAME);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let m: GroundTruthManifest = serde_json::from_slice(&bytes)?;
    let t = bundle.frames();
    let gt_err = |msg: String| SynthError::GroundTruth(msg);
    if m.frames != t || m.trajectory.len() != t || m.true_depths.len() != t || m.labels.len() != t || m.mover_centers.len() != t {
        return Err(gt_err(format!("gt.json does not describe {t} frames")));
    }
    let movers = m.mover_centers[0].len();
    if m.mover_centers.iter().any(|c| c.len() != movers) {
        return Err(gt_err("mover count changes between frames".into()));
    }
    let masks = bundle
        .gt_masks
        .clone()
        .ok_or_else(|| gt_err("scene has no gt_masks".into()))?;
    let cameras = m
        .trajectory
        .iter()
        .enumerate()
        .map(|(index, c)| c.to_camera().map_err(|source| SynthError::Camera { index, source }))
        .collect::<Result<Vec<_>, _>>()?;
    let load = |names: &[String]| -> Result<Vec<TensorMap>, SynthError> {
        names
            .iter()
            .map(|n| {
                check_relative(n)?;
                let tensor = read_tensor(&dir.join(n)).map_err(|source| SynthError::Tensor {
                    file: n.clone(),
                    source,
                })?;
                if tensor.dims() != [bundle.height, bundle.width] {
                    return Err(SynthError::GroundTruth(format!("{n} has dims {:?}", tensor.dims())));
                }
                Ok(tensor)
            })
            .collect()
    };
    let labels = load(&m.labels)?;
    if labels
        .iter()
        .flat_map(|l| l.data())
        .any(|&v| v.fract() != 0.0 || v < -1.0 || v > movers as f32)
    {
        return Err(gt_err("labels must be integers in [-1, movers]".into()));
    }
    Ok(Some(GroundTruth {
        masks,
        cameras,
        labels,
        true_depths: load(&m.true_depths)?,
        mover_centers: m.mover_centers,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelRef {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    pub bundle: SceneBundle,
    /// Isolated false-positive pixels to be merged into dynamic masks.
    pub outliers: Vec<PixelRef>,
    /// Pixels whose depth was invalidated by occluder blocks.
    pub occluded: usize,
}

impl Corruption {
    /// `masks` with every outlier pixel set.
    pub fn inject(&self, masks: &MaskStack) -> MaskStack {
        let mut out = masks.clone();
        for p in &self.outliers {
            out.frames_mut()[p.frame].set(p.row, p.col, true);
        }
        out
    }
}

/// Minimum world distance between two injected outliers, and between an
/// outlier and any ground-truth dynamic pixel's patch neighbourhood.
pub const OUTLIER_SEPARATION: f64 = 0.3;

/// Picks `outlier_points` isolated static pixels with valid depth, at least
/// one patch away from any ground-truth dynamic pixel and
/// `OUTLIER_SEPARATION` meters from each other in the world, and zeroes the
/// depth of random patch-sized blocks until `occluder_fraction` of all
/// pixels is invalid.
pub fn corrupt(bundle: &SceneBundle, occluder_fraction: f64, outlier_points: usize, seed: u64) -> Corruption {
    let mut out = bundle.clone();
    let (h, w, t) = (bundle.height, bundle.width, bundle.frames());
    let mut rng = rng_for(seed, 0, STREAM_CORRUPT);

    let near_dynamic: Vec<Mask> = match &bundle.gt_masks {
        Some(gt) => gt
            .frames()
            .iter()
            .map(|m| {
                let mut grown = m.clone();
                for _ in 0..bundle.patch {
                    grown = grown.dilate3();
                }
                grown
            })
            .collect(),
        None => vec![Mask::new(h, w); t],
    };
    let mut outliers: Vec<PixelRef> = Vec::with_capacity(outlier_points);
    let mut placed: Vec<Vector3<f64>> = Vec::new();
    let mut attempts = 0usize;
    while outliers.len() < outlier_points && attempts < 10_000 * outlier_points.max(1) {
        attempts += 1;
        let p = PixelRef {
            frame: rng.gen_range(0..t),
            row: rng.gen_range(0..h),
            col: rng.gen_range(0..w),
        };
        let d = bundle.depth(p.frame, p.row, p.col);
        if d <= 0.0 || near_dynamic[p.frame].get(p.row, p.col) {
            continue;
        }
        let x = bundle.cameras[p.frame].unproject(&Pixel::new(p.col as f64, p.row as f64), d as f64);
        if placed.iter().any(|q| (q - x).norm() < OUTLIER_SEPARATION) {
            continue;
        }
        placed.push(x);
        outliers.push(p);
    }

    let mut occluded = 0usize;
    let target = (occluder_fraction.clamp(0.0, 1.0) * (h * w * t) as f64).ceil() as usize;
    let patch = bundle.patch;
    let blocks = (h / patch) * (w / patch);
    let mut cells: Vec<(usize, usize)> = (0..t).flat_map(|f| (0..blocks).map(move |b| (f, b))).collect();
    cells.shuffle(&mut rng);
    for (f, b) in cells {
        if occluded >= target {
            break;
        }
        let r0 = (b / (w / patch)) * patch;
        let c0 = (b % (w / patch)) * patch;
        let data = out.depths[f].data_mut();
        for row in r0..r0 + patch {
            for col in c0..c0 + patch {
                data[row * w + col] = 0.0;
            }
        }
        occluded += patch * patch;
    }
    Corruption {
        bundle: out,
        outliers,
        occluded,
    }
}

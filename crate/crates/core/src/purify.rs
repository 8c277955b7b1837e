//! Dynamic point cloud construction and radius-support purification.
//!
//! Every point needs at least `tau` other points within radius `r` to
//! survive, where `r = r_factor * D_scene` and `D_scene` is the bounding-box
//! diagonal of the alive cloud. Supports are computed once against the
//! unfiltered cloud; there is no iteration.

use std::collections::HashMap;
use std::io::{self, Write};

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::attention::SaliencyMap;
use crate::geometry::Pixel;
use crate::mask::{Mask, MaskStack};
use crate::scene::SceneBundle;
use crate::spatial::SpatialIndex;

pub const DEFAULT_TAU: usize = 16;
pub const DEFAULT_R_FACTOR: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub position: Vector3<f64>,
    pub frame: usize,
    pub row: usize,
    pub col: usize,
    pub saliency: f32,
    pub alive: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DynamicPointCloud {
    pub points: Vec<CloudPoint>,
}

impl DynamicPointCloud {
    pub fn from_points(points: Vec<CloudPoint>) -> Self {
        Self { points }
    }

    /// Cloud of alive points at the given positions, with no pixel origin.
    pub fn from_positions(positions: &[Vector3<f64>]) -> Self {
        Self {
            points: positions
                .iter()
                .map(|&position| CloudPoint {
                    position,
                    frame: 0,
                    row: 0,
                    col: 0,
                    saliency: 1.0,
                    alive: true,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn alive_count(&self) -> usize {
        self.points.iter().filter(|p| p.alive).count()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| p.position).collect()
    }

    pub fn alive_positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().filter(|p| p.alive).map(|p| p.position).collect()
    }

    pub fn alive_indices(&self) -> Vec<usize> {
        (0..self.points.len()).filter(|&i| self.points[i].alive).collect()
    }
}

/// Lifts every masked pixel with valid depth to a world point
/// `R^T (depth * K^-1 x - t)`. `saliency`, when given, is sampled at the
/// pixel's patch; otherwise points carry saliency 1.
pub fn unproject_mask(
    bundle: &SceneBundle,
    masks: &MaskStack,
    saliency: Option<&[SaliencyMap]>,
) -> DynamicPointCloud {
    let mut points = Vec::new();
    for (f, mask) in masks.frames().iter().enumerate().take(bundle.frames()) {
        let cam = &bundle.cameras[f];
        for row in 0..mask.height() {
            for col in 0..mask.width() {
                if !mask.get(row, col) {
                    continue;
                }
                let depth = bundle.depth(f, row, col);
                if depth <= 0.0 {
                    continue;
                }
                let position = cam.unproject(&Pixel::new(col as f64, row as f64), depth as f64);
                let s = saliency
                    .map(|maps| maps[f].at_pixel(row, col, bundle.patch) as f32)
                    .unwrap_or(1.0);
                points.push(CloudPoint {
                    position,
                    frame: f,
                    row,
                    col,
                    saliency: s,
                    alive: true,
                });
            }
        }
    }
    DynamicPointCloud { points }
}

/// Bounding-box diagonal of the alive points; 0 for fewer than one point.
pub fn scene_diagonal(cloud: &DynamicPointCloud) -> f64 {
    let mut it = cloud.points.iter().filter(|p| p.alive).map(|p| p.position);
    let Some(first) = it.next() else {
        return 0.0;
    };
    let (min, max) = it.fold((first, first), |(lo, hi), p| (lo.inf(&p), hi.sup(&p)));
    (max - min).norm()
}

/// Support degree of every point (`None` for dead points) at radius `r`.
pub fn support_degrees(cloud: &DynamicPointCloud, r: f64) -> Vec<Option<usize>> {
    let positions = cloud.positions();
    if r > 0.0 {
        let index = SpatialIndex::build(&positions, r, |i| cloud.points[i].alive);
        (0..cloud.len())
            .into_par_iter()
            .map(|i| cloud.points[i].alive.then(|| index.count_within(i, &positions[i])))
            .collect()
    } else {
        // zero radius: only coincident points support each other
        let mut groups: HashMap<[u64; 3], usize> = HashMap::new();
        for p in cloud.points.iter().filter(|p| p.alive) {
            *groups.entry(position_key(&p.position)).or_default() += 1;
        }
        cloud
            .points
            .iter()
            .map(|p| p.alive.then(|| groups[&position_key(&p.position)] - 1))
            .collect()
    }
}

fn position_key(p: &Vector3<f64>) -> [u64; 3] {
    // +0.0 and -0.0 are the same position
    [p.x + 0.0, p.y + 0.0, p.z + 0.0].map(f64::to_bits)
}

/// `|{ j != i alive : |p_i - p_j| <= r }|` through a prebuilt index.
pub fn radius_neighbors(cloud: &DynamicPointCloud, index: &SpatialIndex, i: usize) -> usize {
    debug_assert!(cloud.points[i].alive);
    index.count_within(i, &cloud.points[i].position)
}

/// One-shot support filter at an explicit radius: points with fewer than
/// `tau` neighbours are marked dead.
pub fn purify_with_radius(cloud: &DynamicPointCloud, tau: usize, r: f64) -> DynamicPointCloud {
    let degrees = support_degrees(cloud, r);
    let mut out = cloud.clone();
    for (p, d) in out.points.iter_mut().zip(degrees) {
        if let Some(d) = d {
            if d < tau {
                p.alive = false;
            }
        }
    }
    out
}

/// Support filter with the adaptive radius `r_factor * D_scene`.
pub fn purify(cloud: &DynamicPointCloud, tau: usize, r_factor: f64) -> DynamicPointCloud {
    purify_with_radius(cloud, tau, r_factor * scene_diagonal(cloud))
}

/// Marks every pixel that produced an alive point.
pub fn mask_from_cloud(cloud: &DynamicPointCloud, frames: usize, height: usize, width: usize) -> MaskStack {
    let mut masks = vec![Mask::new(height, width); frames];
    for p in cloud.points.iter().filter(|p| p.alive) {
        masks[p.frame].set(p.row, p.col, true);
    }
    MaskStack::new(masks).expect("uniform dims")
}

/// ASCII PLY with `x y z saliency alive` per vertex, dead points included.
pub fn write_ply<W: Write>(cloud: &DynamicPointCloud, mut out: W) -> io::Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", cloud.len())?;
    for name in ["x", "y", "z", "saliency"] {
        writeln!(out, "property float {name}")?;
    }
    writeln!(out, "property uchar alive")?;
    writeln!(out, "end_header")?;
    for p in &cloud.points {
        writeln!(
            out,
            "{} {} {} {} {}",
            p.position.x as f32,
            p.position.y as f32,
            p.position.z as f32,
            p.saliency,
            u8::from(p.alive)
        )?;
    }
    Ok(())
}

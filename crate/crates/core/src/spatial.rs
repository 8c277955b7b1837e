//! Fixed-radius counting on a uniform voxel grid and exact nearest-neighbour
//! queries on 3D point sets.

use std::collections::HashMap;

use nalgebra::Vector3;
use rstar::RTree;

type Cell = (i64, i64, i64);

#[inline]
fn cell_of(p: &Vector3<f64>, edge: f64) -> Cell {
    (
        (p.x / edge).floor() as i64,
        (p.y / edge).floor() as i64,
        (p.z / edge).floor() as i64,
    )
}

/// Hash grid with cell edge equal to the query radius. A ball of radius `r`
/// around any point is covered by the 27 cells around the point's own cell.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    edge: f64,
    buckets: HashMap<Cell, Vec<(u32, Vector3<f64>)>>,
}

impl SpatialIndex {
    /// Indexes `points[i]` for every `i` with `include(i)`.
    pub fn build(points: &[Vector3<f64>], radius: f64, include: impl Fn(usize) -> bool) -> Self {
        assert!(radius > 0.0 && radius.is_finite(), "radius must be positive");
        let mut buckets: HashMap<Cell, Vec<(u32, Vector3<f64>)>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            if include(i) {
                buckets.entry(cell_of(p, radius)).or_default().push((i as u32, *p));
            }
        }
        Self {
            edge: radius,
            buckets,
        }
    }

    pub fn radius(&self) -> f64 {
        self.edge
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    /// Number of indexed points `j != i` with `|p - p_j| <= radius`, where
    /// `p` is the position of point `i`.
    pub fn count_within(&self, i: usize, p: &Vector3<f64>) -> usize {
        let (cx, cy, cz) = cell_of(p, self.edge);
        let r2 = self.edge * self.edge;
        let mut count = 0;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.buckets.get(&(cx + dx, cy + dy, cz + dz)) {
                        for (j, q) in bucket {
                            if *j as usize != i && (q - p).norm_squared() <= r2 {
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
        count
    }
}

/// Exact nearest-neighbour queries over a fixed point set (R*-tree).
#[derive(Debug, Clone)]
pub struct NearestTree {
    tree: RTree<[f64; 3]>,
}

impl NearestTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        assert!(!points.is_empty(), "nearest tree needs points");
        Self {
            tree: RTree::bulk_load(points.iter().map(|p| [p.x, p.y, p.z]).collect()),
        }
    }

    /// Squared distance to the closest indexed point.
    pub fn nearest_squared(&self, q: &Vector3<f64>) -> f64 {
        let p = self.tree.nearest_neighbor([q.x, q.y, q.z]).expect("non-empty tree");
        (Vector3::from(*p) - q).norm_squared()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_nearest(points: &[Vector3<f64>], q: &Vector3<f64>) -> f64 {
        points
            .iter()
            .map(|p| (p - q).norm_squared())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..10 {
            let n = 50 + trial * 40;
            let pts: Vec<Vector3<f64>> = (0..n)
                .map(|_| Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..0.1)))
                .collect();
            let grid = NearestTree::new(&pts);
            for _ in 0..100 {
                let q = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
                assert_eq!(grid.nearest_squared(&q), brute_nearest(&pts, &q));
            }
        }
    }

    #[test]
    fn nearest_with_duplicates_and_single_point() {
        let pts = vec![Vector3::new(1.0, 1.0, 1.0); 10];
        let grid = NearestTree::new(&pts);
        assert_eq!(grid.nearest_squared(&Vector3::new(1.0, 1.0, 1.0)), 0.0);
        assert_eq!(grid.nearest_squared(&Vector3::new(1.0, 1.0, 4.0)), 9.0);
    }

    #[test]
    fn radius_count_inclusive_boundary() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.5, 0.0, 0.0)];
        let idx = SpatialIndex::build(&pts, 0.5, |_| true);
        assert_eq!(idx.count_within(0, &pts[0]), 1);
        assert_eq!(idx.count_within(1, &pts[1]), 1);
    }
}

//! Variance-weighted fusion of attention heads into a per-frame saliency map.
//!
//! Each head is scored by the population variance of its spatial response;
//! the fused map is the variance-proportional convex combination of the
//! heads, min-max normalized to [0, 1]. Diffuse heads have near-zero
//! variance and drop out of the fusion.

use crate::mask::Mask;
use crate::tensor::TensorMap;

/// Stabilizer added to the variance total.
pub const DEFAULT_EPS: f64 = 1e-8;
/// Below this total variance every head is treated as uninformative and the
/// fusion falls back to uniform weights.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;
/// Default saliency threshold after normalization.
pub const DEFAULT_THETA: f64 = 0.5;

/// Attention responses of one frame: `heads` maps of `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStack {
    pub frame_index: usize,
    pub height: usize,
    pub width: usize,
    heads: Vec<Vec<f64>>,
}

impl HeadStack {
    pub fn new(frame_index: usize, height: usize, width: usize, heads: Vec<Vec<f64>>) -> Self {
        assert!(!heads.is_empty(), "head stack needs at least one head");
        for h in &heads {
            assert_eq!(h.len(), height * width, "head map size");
        }
        Self {
            frame_index,
            height,
            width,
            heads,
        }
    }

    /// Splits a `heads x H' x W'` tensor.
    pub fn from_tensor(frame_index: usize, t: &TensorMap) -> Self {
        let dims = t.dims();
        assert_eq!(dims.len(), 3, "attention tensor must be heads x H' x W'");
        let (n, h, w) = (dims[0], dims[1], dims[2]);
        let heads = t
            .data()
            .chunks_exact(h * w)
            .take(n)
            .map(|c| c.iter().map(|&v| v as f64).collect())
            .collect();
        Self::new(frame_index, h, w, heads)
    }

    pub fn heads(&self) -> &[Vec<f64>] {
        &self.heads
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

/// Fused saliency on the patch grid together with the effective head
/// weights used to produce it.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub head_weights: Vec<f64>,
}

impl SaliencyMap {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Saliency of image pixel `(row, col)` for a given patch factor.
    #[inline]
    pub fn at_pixel(&self, row: usize, col: usize, patch: usize) -> f64 {
        self.get(row / patch, col / patch)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Population variance `(1/|Omega|) sum (A(u) - mean)^2`, two passes in
/// fixed order.
pub fn head_variance(head: &[f64]) -> f64 {
    assert!(!head.is_empty(), "empty head map");
    let n = head.len() as f64;
    let mean = head.iter().sum::<f64>() / n;
    head.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / n
}

/// Raw weights `w_h = V_h / (sum_k V_k + eps)`.
pub fn head_weights(stack: &HeadStack, eps: f64) -> Vec<f64> {
    let variances: Vec<f64> = stack.heads.iter().map(|h| head_variance(h)).collect();
    let total: f64 = variances.iter().sum();
    variances.iter().map(|v| v / (total + eps)).collect()
}

/// Weights actually used for fusion: the raw weights renormalized to sum to
/// one, or uniform when the total variance is degenerate.
pub fn effective_weights(stack: &HeadStack, eps: f64) -> Vec<f64> {
    let raw = head_weights(stack, eps);
    let total_variance: f64 = stack.heads.iter().map(|h| head_variance(h)).sum();
    let n = raw.len();
    if total_variance <= DEGENERATE_VARIANCE {
        return vec![1.0 / n as f64; n];
    }
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|w| w / sum).collect()
}

/// Uniform averaging weights, `1/H` each.
pub fn uniform_weights(stack: &HeadStack) -> Vec<f64> {
    vec![1.0 / stack.len() as f64; stack.len()]
}

/// Fuses heads with the given weights and min-max normalizes. A constant
/// result becomes all zeros.
pub fn fuse(stack: &HeadStack, weights: &[f64]) -> SaliencyMap {
    assert_eq!(weights.len(), stack.len());
    let n = stack.height * stack.width;
    let mut values = vec![0.0; n];
    for (head, &w) in stack.heads.iter().zip(weights) {
        for (acc, &a) in values.iter_mut().zip(head) {
            *acc += w * a;
        }
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if range <= 1e-12 * hi.abs().max(lo.abs()).max(1.0) {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - lo) / range);
    }
    SaliencyMap {
        height: stack.height,
        width: stack.width,
        values,
        head_weights: weights.to_vec(),
    }
}

/// Variance-weighted fusion.
pub fn aggregate(stack: &HeadStack, eps: f64) -> SaliencyMap {
    fuse(stack, &effective_weights(stack, eps))
}

/// Plain head averaging.
pub fn aggregate_uniform(stack: &HeadStack) -> SaliencyMap {
    fuse(stack, &uniform_weights(stack))
}

/// Thresholds `s >= theta` and replicates each patch cell over a
/// `patch x patch` image block.
pub fn binarize(s: &SaliencyMap, theta: f64, patch: usize) -> Mask {
    assert!(patch > 0);
    Mask::from_fn(s.height * patch, s.width * patch, |row, col| {
        s.at_pixel(row, col, patch) >= theta
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stack(heads: Vec<Vec<f64>>, h: usize, w: usize) -> HeadStack {
        HeadStack::new(0, h, w, heads)
    }

    #[test]
    fn variance_hand_values() {
        assert_eq!(head_variance(&[0.5; 9]), 0.0);
        assert_eq!(head_variance(&[0.0, 0.0, 1.0, 1.0]), 0.25);
    }

    #[test]
    fn variance_matches_welford() {
        let mut rng = 12345u64;
        let head: Vec<f64> = (0..500)
            .map(|_| {
                rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (rng >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        // Welford's online update
        let (mut mean, mut m2) = (0.0, 0.0);
        for (i, &x) in head.iter().enumerate() {
            let d = x - mean;
            mean += d / (i + 1) as f64;
            m2 += d * (x - mean);
        }
        let oracle = m2 / head.len() as f64;
        let v = head_variance(&head);
        assert!(((v - oracle) / oracle).abs() < 1e-12);
    }

    #[test]
    fn weights_proportional_to_variance() {
        // variance 3 and 1
        let a = vec![0.0, 0.0, 2.0 * 3f64.sqrt(), 2.0 * 3f64.sqrt()];
        let b = vec![0.0, 0.0, 2.0, 2.0];
        assert!((head_variance(&a) - 3.0).abs() < 1e-12);
        let s = stack(vec![a.clone(), b.clone()], 2, 2);
        let w = head_weights(&s, 1e-15);
        assert!((w[0] - 0.75).abs() < 1e-12 && (w[1] - 0.25).abs() < 1e-12);
        let eff = effective_weights(&s, DEFAULT_EPS);
        assert!((eff.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let swapped = stack(vec![b, a], 2, 2);
        let w2 = head_weights(&swapped, 1e-15);
        assert_eq!(w2, vec![w[1], w[0]]);
    }

    #[test]
    fn all_constant_heads_fall_back_to_uniform() {
        let s = stack(vec![vec![0.3; 4], vec![0.3; 4], vec![0.3; 4]], 2, 2);
        assert!(head_weights(&s, DEFAULT_EPS).iter().all(|&w| w == 0.0));
        let eff = effective_weights(&s, DEFAULT_EPS);
        assert!(eff.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        let sal = aggregate(&s, DEFAULT_EPS);
        assert!(sal.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_head_is_normalized_copy() {
        let head = vec![2.0, 4.0, 6.0, 10.0];
        let sal = aggregate(&stack(vec![head], 2, 2), DEFAULT_EPS);
        assert_eq!(sal.values, vec![0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn peaked_head_wins_over_constant_heads() {
        let mut peaked = vec![0.1; 25];
        peaked[17] = 3.0;
        let mut heads = vec![peaked];
        for k in 0..9 {
            heads.push(vec![0.2 + 0.05 * k as f64; 25]);
        }
        let sal = aggregate(&stack(heads, 5, 5), DEFAULT_EPS);
        assert_eq!(sal.argmax(), 17);
    }

    #[test]
    fn binarize_boundaries_and_replication() {
        let sal = SaliencyMap {
            height: 2,
            width: 2,
            values: vec![0.0, 1.0, 0.2, 0.7],
            head_weights: vec![1.0],
        };
        assert_eq!(binarize(&sal, 0.0, 3).count(), 36);
        assert_eq!(binarize(&sal, 1.01, 3).count(), 0);

        let mut values = vec![0.0; 4];
        values[3] = 1.0;
        let sal = SaliencyMap { values, ..sal };
        let m = binarize(&sal, 0.5, 14);
        assert_eq!(m.count(), 14 * 14);
        for r in 14..28 {
            for c in 14..28 {
                assert!(m.get(r, c));
            }
        }
    }

    proptest! {
        #[test]
        fn variance_shift_and_scale(
            head in prop::collection::vec(-5.0f64..5.0, 2..64),
            c in -10.0f64..10.0,
            k in -4.0f64..4.0,
        ) {
            let v = head_variance(&head);
            let shifted: Vec<f64> = head.iter().map(|a| a + c).collect();
            let scaled: Vec<f64> = head.iter().map(|a| a * k).collect();
            prop_assert!((head_variance(&shifted) - v).abs() <= 1e-9 * (1.0 + v));
            prop_assert!((head_variance(&scaled) - k * k * v).abs() <= 1e-9 * (1.0 + k * k * v));
        }

        #[test]
        fn effective_weights_are_convex(
            heads in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 16), 1..8),
        ) {
            let s = stack(heads, 4, 4);
            let w = effective_weights(&s, DEFAULT_EPS);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            let raw = head_weights(&s, DEFAULT_EPS);
            prop_assert!(raw.iter().sum::<f64>() <= 1.0);
        }

        #[test]
        fn argmax_ignores_constant_distractors(
            signal in prop::collection::vec(0.0f64..1.0, 16),
            levels in prop::collection::vec(-1.0f64..1.0, 1..6),
        ) {
            let base = aggregate(&stack(vec![signal.clone()], 4, 4), DEFAULT_EPS);
            let mut heads = vec![signal];
            heads.extend(levels.iter().map(|&l| vec![l; 16]));
            let with = aggregate(&stack(heads, 4, 4), DEFAULT_EPS);
            prop_assert_eq!(base.argmax(), with.argmax());
            prop_assert_eq!(base.values, with.values);
        }

        #[test]
        fn aggregation_is_deterministic(heads in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 9), 1..5)) {
            let s = stack(heads, 3, 3);
            prop_assert_eq!(aggregate(&s, DEFAULT_EPS), aggregate(&s, DEFAULT_EPS));
        }
    }
}

use dyndecouple::consistency::{activate_all, gather_projections, DEFAULT_OCCLUSION_TOLERANCE};
use dyndecouple::geometry::Pixel;
use dyndecouple::mask::MaskStack;
use dyndecouple::purify::{purify, unproject_mask};
use dyndecouple::scene::SceneBundle;
use dyndecouple::synth::{corrupt, generate, SceneSpec};

/// (visible, total) flags for points lifted from a pixel grid of frame 0.
fn visibility(lift_from: &SceneBundle, bundle: &SceneBundle) -> Vec<bool> {
    let conf = activate_all(bundle);
    let mut flags = Vec::new();
    for row in (0..lift_from.height).step_by(3) {
        for col in (0..lift_from.width).step_by(3) {
            let d = lift_from.depth(0, row, col);
            if d <= 0.0 {
                continue;
            }
            let x = lift_from.cameras[0].unproject(&Pixel::new(col as f64, row as f64), d as f64);
            let color = lift_from.color(0, row, col).map(|v| v as f64);
            for rec in gather_projections(&x, color, bundle, &conf, DEFAULT_OCCLUSION_TOLERANCE) {
                flags.push(rec.visible);
            }
        }
    }
    flags
}

#[test]
fn occluders_hide_a_fifth_of_visible_records() {
    let g = generate(&SceneSpec::corpus(21)).unwrap();
    let c = corrupt(&g.bundle, 0.2, 0, 5);
    let before = visibility(&g.bundle, &g.bundle);
    let after = visibility(&g.bundle, &c.bundle);
    assert_eq!(before.len(), after.len());
    let visible = before.iter().filter(|&&v| v).count();
    let lost = before.iter().zip(&after).filter(|(&b, &a)| b && !a).count();
    let frac = lost as f64 / visible as f64;
    assert!(frac >= 0.15, "only {:.1}% of visible records hidden", 100.0 * frac);
}

#[test]
fn injected_outliers_are_purified() {
    let g = generate(&SceneSpec::corpus(22)).unwrap();
    let gt = g.bundle.gt_masks.clone().unwrap();
    let c = corrupt(&g.bundle, 0.0, 50, 9);
    assert_eq!(c.outliers.len(), 50);
    let empty = MaskStack::empty(gt.len(), g.bundle.height, g.bundle.width);
    let dense = unproject_mask(&c.bundle, &gt, None);
    let n = dense.len();
    let mut points = dense.points;
    points.extend(unproject_mask(&c.bundle, &c.inject(&empty), None).points);
    let out = purify(&dyndecouple::purify::DynamicPointCloud::from_points(points), 16, 0.02);
    let removed = out.points[n..].iter().filter(|p| !p.alive).count();
    assert!(removed >= 45, "{removed}/50 outliers removed");
}

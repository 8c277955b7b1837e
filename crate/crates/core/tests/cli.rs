use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dyndecouple::cli::{mask_file_name, read_masks};
use dyndecouple::eval::{MetricReport, DEFAULT_BOUNDARY_TOL};
use dyndecouple::mask::MaskStack;
use dyndecouple::pipeline::{self, PipelineConfig, PipelineReport, ResidualSummary};
use dyndecouple::scene::load_scene;
use dyndecouple::synth::{load_ground_truth, SceneSpec};
use dyndecouple::tensor::read_tensor;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dyndecouple")).args(args).output().unwrap()
}

fn demo_spec() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/demo_scene.json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate_demo(dir: &Path) -> PathBuf {
    let scene = dir.join("scene");
    let out = bin(&["generate", s(&demo_spec()), "--out", s(&scene)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    scene
}

fn write_spec(dir: &Path, spec: &SceneSpec) -> PathBuf {
    let p = dir.join("spec.json");
    fs::write(&p, serde_json::to_vec(spec).unwrap()).unwrap();
    p
}

#[test]
fn generated_scene_loads_and_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["generate", s(&demo_spec()), "--out", s(&dir.path().join("scene"))]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("6 frames") && stdout.contains("2 movers") && stdout.contains("seed 42"), "{stdout}");
    let bundle = load_scene(&dir.path().join("scene")).unwrap();
    assert_eq!(bundle.frames(), 6);
    assert!(load_ground_truth(&dir.path().join("scene"), &bundle).unwrap().is_some());
}

#[test]
fn bad_spec_json_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, b"{\"seed\": 1, \"frames\": ").unwrap();
    let out = bin(&["generate", s(&p), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.json") && stderr.contains("EOF"), "{stderr}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(bin(&[]).status.code(), Some(1));
    assert_eq!(bin(&["mask"]).status.code(), Some(1));
    assert_eq!(bin(&["mask", "x", "--out", "y", "--bogus"]).status.code(), Some(1));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert!(bin(&["generate", s(&demo_spec()), "--out", s(d), "--seed", "5"]).status.success());
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 20);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
    let c = dir.path().join("c");
    assert!(bin(&["generate", s(&demo_spec()), "--out", s(&c), "--seed", "6"]).status.success());
    assert_ne!(fs::read(a.join("depth_000.dmt")).unwrap(), fs::read(c.join("depth_000.dmt")).unwrap());
}

#[test]
fn mask_matches_in_process_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_demo(dir.path());
    let pred = dir.path().join("pred");
    assert!(bin(&["mask", s(&scene), "--out", s(&pred)]).status.success());
    let bundle = load_scene(&scene).unwrap();
    let config = PipelineConfig::default();
    let expected = pipeline::run(&bundle, &config);
    assert_eq!(read_masks(&pred, bundle.frames()).unwrap(), expected.masks);
    let report: PipelineReport = serde_json::from_slice(&fs::read(pred.join("pipeline.json")).unwrap()).unwrap();
    assert_eq!(report, PipelineReport::new(&config, &expected));
    let mut ply = Vec::new();
    dyndecouple::purify::write_ply(&expected.cloud, &mut ply).unwrap();
    assert_eq!(fs::read(pred.join("cloud.ply")).unwrap(), ply);
    for f in 0..bundle.frames() {
        let bytes = fs::read(pred.join(mask_file_name(f))).unwrap();
        assert!(bytes.starts_with(b"P5"));
    }
}

#[test]
fn config_file_and_flags_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_demo(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, br#"{"tau": 8, "theta_dyn": 0.2}"#).unwrap();
    let pred = dir.path().join("pred");
    let out = bin(&[
        "mask",
        s(&scene),
        "--config",
        s(&cfg),
        "--out",
        s(&pred),
        "--disable-purification",
        "--timing",
    ]);
    assert!(out.status.success());
    let report: PipelineReport = serde_json::from_slice(&fs::read(pred.join("pipeline.json")).unwrap()).unwrap();
    assert_eq!(report.config.tau, 8);
    assert_eq!(report.config.theta_dyn, 0.2);
    assert!(!report.config.stages.purification && report.config.stages.uncertainty);
    assert!(report.timing_ms.is_some());
    assert_eq!(report.stats.purified_points, None);

    fs::write(&cfg, br#"{"tau": 8, "theta_saliency": 2.0}"#).unwrap();
    assert_eq!(bin(&["mask", s(&scene), "--config", s(&cfg), "--out", s(&pred)]).status.code(), Some(2));
}

#[test]
fn baseline_flags_give_binarized_uniform_saliency() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_demo(dir.path());
    let pred = dir.path().join("pred");
    let out = bin(&[
        "mask",
        s(&scene),
        "--out",
        s(&pred),
        "--disable-attention-weighting",
        "--disable-purification",
        "--disable-uncertainty",
    ]);
    assert!(out.status.success());
    let bundle = load_scene(&scene).unwrap();
    let saliency = pipeline::saliency_maps(&bundle, false, 1e-8);
    let expected = pipeline::coarse_masks(&saliency, 0.5, bundle.patch);
    assert_eq!(read_masks(&pred, bundle.frames()).unwrap(), expected);
}

#[test]
fn zero_mover_scene_masks_are_empty() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SceneSpec::from_json_slice(&fs::read(demo_spec()).unwrap()).unwrap();
    spec.movers.clear();
    spec.noise.depth_sigma = 0.0;
    spec.noise.noisy_regions.clear();
    let p = write_spec(dir.path(), &spec);
    let scene = dir.path().join("scene");
    assert!(bin(&["generate", s(&p), "--out", s(&scene)]).status.success());
    let pred = dir.path().join("pred");
    assert!(bin(&["mask", s(&scene), "--out", s(&pred)]).status.success());
    let masks = read_masks(&pred, spec.frames).unwrap();
    assert_eq!(masks.count(), 0);
}

#[test]
fn eval_report_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_demo(dir.path());
    let pred = dir.path().join("pred");
    assert!(bin(&["mask", s(&scene), "--out", s(&pred)]).status.success());
    let out = dir.path().join("eval");
    assert!(bin(&["eval", s(&pred), s(&scene), "--out", s(&out)]).status.success());
    let report: MetricReport = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();

    let bundle = load_scene(&scene).unwrap();
    let truth = load_ground_truth(&scene, &bundle).unwrap();
    let masks = read_masks(&pred, bundle.frames()).unwrap();
    let expected = pipeline::evaluate(&masks, &bundle, truth.as_ref(), DEFAULT_BOUNDARY_TOL).unwrap();
    assert_eq!(report, expected);
    assert!(report.jm.unwrap() > 0.5);
    assert!(report.acc_mean.is_some() && report.ate.is_some());
}

#[test]
fn eval_of_ground_truth_and_its_inverse() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_demo(dir.path());
    let bundle = load_scene(&scene).unwrap();
    let gt = bundle.gt_masks.clone().unwrap();
    let write = |name: &str, masks: &MaskStack| {
        let d = dir.path().join(name);
        fs::create_dir_all(&d).unwrap();
        for (f, m) in masks.frames().iter().enumerate() {
            dyndecouple::mask::write_pgm(m, &d.join(mask_file_name(f))).unwrap();
        }
        assert!(bin(&["eval", s(&d), s(&scene)]).status.success());
        serde_json::from_slice::<MetricReport>(&fs::read(d.join("report.json")).unwrap()).unwrap()
    };
    let same = write("same", &gt);
    assert_eq!((same.jm, same.fm), (Some(1.0), Some(1.0)));
    let inverted = MaskStack::new(gt.frames().iter().map(|m| m.invert()).collect()).unwrap();
    let inv = write("inv", &inverted);
    assert!(inv.jm.unwrap() < 1e-9);
}

#[test]
fn eval_without_ground_truth_reports_nulls() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_demo(dir.path());
    let pred = dir.path().join("pred");
    assert!(bin(&["mask", s(&scene), "--out", s(&pred)]).status.success());
    fs::remove_file(scene.join("gt.json")).unwrap();
    let mut manifest: serde_json::Value = serde_json::from_slice(&fs::read(scene.join("scene.json")).unwrap()).unwrap();
    let obj = manifest.as_object_mut().unwrap();
    obj.remove("gt_masks");
    obj.remove("gt_cameras");
    fs::write(scene.join("scene.json"), serde_json::to_vec(&manifest).unwrap()).unwrap();
    let out = bin(&["eval", s(&pred), s(&scene)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let raw: serde_json::Value = serde_json::from_slice(&fs::read(pred.join("report.json")).unwrap()).unwrap();
    for key in ["jm", "fm", "jr", "fr", "ate", "acc_mean", "dist_median"] {
        assert!(raw[key].is_null(), "{key} = {}", raw[key]);
    }
    assert_eq!(raw["frames"], 6);
}

#[test]
fn residuals_written_and_separated() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_demo(dir.path());
    let out = dir.path().join("res");
    assert!(bin(&["residuals", s(&scene), "--out", s(&out)]).status.success());
    let summary: ResidualSummary = serde_json::from_slice(&fs::read(out.join("residuals.json")).unwrap()).unwrap();
    assert_eq!(summary.pairs.len(), 5);
    let map = read_tensor(&out.join("residual_000.dmt")).unwrap();
    assert_eq!(map.dims(), &[96, 96]);
    assert!(summary.background_max.unwrap() <= 1e-6);
    assert!(summary.mover_median.unwrap() > 100.0 * summary.background_median.unwrap());

    fs::remove_file(scene.join("gt.json")).unwrap();
    assert_eq!(bin(&["residuals", s(&scene), "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn purification_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_demo(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, br#"{"tau": 8, "r_factor": 0.5}"#).unwrap();
    let pred = dir.path().join("pred");
    let args = ["--tau", "12", "--r-factor", "0.03", "--scene-diagonal", "10"];
    let mut full = vec!["mask", s(&scene), "--config", s(&cfg), "--out", s(&pred)];
    full.extend(args);
    assert!(bin(&full).status.success());
    let report: PipelineReport = serde_json::from_slice(&fs::read(pred.join("pipeline.json")).unwrap()).unwrap();
    assert_eq!((report.config.tau, report.config.r_factor), (12, 0.03));
    assert_eq!(report.stats.scene_diagonal, 10.0);
    assert!((report.stats.support_radius.unwrap() - 0.3).abs() < 1e-12);

    let bad = bin(&["mask", s(&scene), "--out", s(&pred), "--scene-diagonal", "0"]);
    assert_eq!(bad.status.code(), Some(2));
}

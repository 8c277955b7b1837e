//! Command-line front end: `generate`, `mask`, `eval`, `residuals`.
//!
//! Exit status is 0 on success, 1 on usage errors and 2 on data errors.

use std::error::Error;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;

use crate::fsutil::write_atomic;
use crate::mask::{read_pgm, write_pgm, MaskStack};
use crate::pipeline::{self, PipelineConfig, PipelineReport};
use crate::purify::write_ply;
use crate::scene::load_scene;
use crate::synth::{generate_to_dir, load_ground_truth, SceneSpec};
use crate::tensor::write_tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

type DataResult = Result<(), Box<dyn Error>>;

#[derive(Debug, Parser)]
#[command(name = "dyndecouple", version, about = "Dynamic/static decoupling on multi-view scene bundles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene bundle with ground truth from a JSON spec.
    Generate {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the decoupling pipeline and write masks, cloud and pipeline.json.
    Mask {
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        disable_attention_weighting: bool,
        #[arg(long)]
        disable_purification: bool,
        #[arg(long)]
        disable_uncertainty: bool,
        /// Minimum neighbour count for purification.
        #[arg(long)]
        tau: Option<usize>,
        /// Support radius as a fraction of the diagonal.
        #[arg(long)]
        r_factor: Option<f64>,
        /// Use this diagonal (scene units) instead of the dynamic cloud's.
        #[arg(long)]
        scene_diagonal: Option<f64>,
        /// Record wall-clock time in pipeline.json (makes it non-reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Score predicted masks against a scene's ground truth.
    Eval {
        pred: PathBuf,
        scene: PathBuf,
        /// Defaults to the prediction directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = crate::eval::DEFAULT_BOUNDARY_TOL)]
        boundary_tol: f64,
    },
    /// Epipolar residual maps between consecutive frames of a generated scene.
    Residuals {
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Generate { spec, out, seed } => cmd_generate(&spec, &out, seed),
        Command::Mask {
            scene,
            config,
            out,
            disable_attention_weighting,
            disable_purification,
            disable_uncertainty,
            tau,
            r_factor,
            scene_diagonal,
            timing,
        } => load_config(config.as_deref()).and_then(|mut c| {
            c.tau = tau.unwrap_or(c.tau);
            c.r_factor = r_factor.unwrap_or(c.r_factor);
            c.scene_diagonal = scene_diagonal.or(c.scene_diagonal);
            c.stages.attention_weighting &= !disable_attention_weighting;
            c.stages.purification &= !disable_purification;
            c.stages.uncertainty &= !disable_uncertainty;
            cmd_mask(&scene, &c, &out, timing)
        }),
        Command::Eval {
            pred,
            scene,
            out,
            boundary_tol,
        } => cmd_eval(&pred, &scene, out.as_deref().unwrap_or(&pred), boundary_tol),
        Command::Residuals { scene, out } => cmd_residuals(&scene, &out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, Box<dyn Error>> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn create_dir(path: &Path) -> DataResult {
    fs::create_dir_all(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> DataResult {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(|e| format!("{}: {e}", path.display()).into())
}

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Box<dyn Error>> {
    let config = match path {
        Some(p) => serde_json::from_slice(&read_file(p)?).map_err(|e| format!("{}: {e}", p.display()))?,
        None => PipelineConfig::default(),
    };
    Ok(config)
}

pub fn mask_file_name(frame: usize) -> String {
    format!("mask_{frame:03}.pgm")
}

pub fn cmd_generate(spec_path: &Path, out: &Path, seed: Option<u64>) -> DataResult {
    let mut spec = SceneSpec::from_json_slice(&read_file(spec_path)?)
        .map_err(|e| format!("{}: {e}", spec_path.display()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    create_dir(out)?;
    generate_to_dir(&spec, out)?;
    println!(
        "generated {} frames, {} movers, seed {} -> {}",
        spec.frames,
        spec.movers.len(),
        spec.seed,
        out.display()
    );
    Ok(())
}

pub fn cmd_mask(scene: &Path, config: &PipelineConfig, out: &Path, timing: bool) -> DataResult {
    config.validate()?;
    let bundle = load_scene(scene)?;
    let start = Instant::now();
    let result = pipeline::run(&bundle, config);
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    create_dir(out)?;
    for (f, m) in result.masks.frames().iter().enumerate() {
        write_pgm(m, &out.join(mask_file_name(f)))?;
    }
    let mut ply = Vec::new();
    write_ply(&result.cloud, &mut ply)?;
    let ply_path = out.join("cloud.ply");
    write_atomic(&ply_path, &ply).map_err(|e| format!("{}: {e}", ply_path.display()))?;
    let mut report = PipelineReport::new(config, &result);
    if timing {
        report.timing_ms = Some(elapsed);
    }
    write_json(&report, &out.join("pipeline.json"))?;
    info!(
        "{} unprojected, {:?} purified, {:?} refined points",
        result.stats.unprojected_points, result.stats.purified_points, result.stats.refined_points
    );
    println!("masked {} frames -> {}", result.masks.len(), out.display());
    Ok(())
}

/// Reads `mask_000.pgm`, `mask_001.pgm`, ... for `frames` frames.
pub fn read_masks(dir: &Path, frames: usize) -> Result<MaskStack, Box<dyn Error>> {
    let masks = (0..frames)
        .map(|f| {
            let p = dir.join(mask_file_name(f));
            read_pgm(&p).map_err(|e| format!("{}: {e}", p.display()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MaskStack::new(masks)?)
}

pub fn cmd_eval(pred_dir: &Path, scene: &Path, out: &Path, tol_frac: f64) -> DataResult {
    let bundle = load_scene(scene)?;
    let pred = read_masks(pred_dir, bundle.frames())?;
    let truth = load_ground_truth(scene, &bundle)?;
    let report = pipeline::evaluate(&pred, &bundle, truth.as_ref(), tol_frac)?;
    create_dir(out)?;
    write_json(&report, &out.join("report.json"))?;
    match report.jm {
        Some(jm) => println!("JM {jm:.4} FM {:.4}", report.fm.unwrap_or(f64::NAN)),
        None => println!("no ground-truth masks; partial report written"),
    }
    Ok(())
}

pub fn residual_file_name(reference: usize) -> String {
    format!("residual_{reference:03}.dmt")
}

pub fn cmd_residuals(scene: &Path, out: &Path) -> DataResult {
    let bundle = load_scene(scene)?;
    let truth = load_ground_truth(scene, &bundle)?
        .ok_or_else(|| format!("{}: no ground truth", scene.display()))?;
    let analysis = pipeline::epipolar_residuals(&truth);
    create_dir(out)?;
    for (i, map) in analysis.maps.iter().enumerate() {
        write_tensor(map, &out.join(residual_file_name(i)))?;
    }
    write_json(&analysis.summary, &out.join("residuals.json"))?;
    println!(
        "mover median {:?}, background median {:?}",
        analysis.summary.mover_median, analysis.summary.background_median
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["dyndecouple"]), EXIT_USAGE);
        assert_eq!(run(["dyndecouple", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["dyndecouple", "generate", "spec.json"]), EXIT_USAGE);
        assert_eq!(run(["dyndecouple", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_inputs_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let out = dir.path().join("out");
        let (m, o) = (missing.to_str().unwrap(), out.to_str().unwrap());
        assert_eq!(run(["dyndecouple", "generate", m, "--out", o]), EXIT_DATA);
        assert_eq!(run(["dyndecouple", "mask", m, "--out", o]), EXIT_DATA);
        assert_eq!(run(["dyndecouple", "residuals", m, "--out", o]), EXIT_DATA);
        assert_eq!(run(["dyndecouple", "eval", m, m]), EXIT_DATA);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, br#"{"tau": 4}"#).unwrap();
        let c = load_config(Some(&p)).unwrap();
        assert_eq!(c.tau, 4);
        assert!(c.stages.purification);
        fs::write(&p, b"{").unwrap();
        assert!(load_config(Some(&p)).is_err());
    }

    #[test]
    fn file_names() {
        assert_eq!(mask_file_name(7), "mask_007.pgm");
        assert_eq!(residual_file_name(12), "residual_012.dmt");
    }
}

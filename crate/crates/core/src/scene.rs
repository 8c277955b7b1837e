//! Multi-view scene bundles and the `scene.json` manifest.
//!
//! A bundle directory holds one `scene.json` plus the tensor and mask files
//! it names (paths relative to the directory). See [`SceneManifest`] for the
//! schema.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::geometry::{CameraModel, GeometryError, Intrinsics};
use crate::mask::{read_pgm, write_pgm, MaskError, MaskStack};
use crate::tensor::{read_tensor, write_tensor, TensorError, TensorMap};

pub const MANIFEST_NAME: &str = "scene.json";

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{file}: {source}")]
    Tensor {
        file: String,
        #[source]
        source: TensorError,
    },
    #[error("{file}: {source}")]
    Mask {
        file: String,
        #[source]
        source: MaskError,
    },
    #[error("{what}: dims {actual:?}, expected {expected:?}")]
    Shape {
        what: String,
        actual: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("{what}: {msg}")]
    Value { what: String, msg: String },
    #[error("camera {index}: {source}")]
    Camera {
        index: usize,
        #[source]
        source: GeometryError,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One camera entry of the manifest. `R` is row-major world-to-camera,
/// `t` in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<CameraModel, GeometryError> {
        CameraModel::new(
            Intrinsics::new(self.fx, self.fy, self.cx, self.cy),
            Matrix3::from_row_slice(&self.r),
            Vector3::from(self.t),
        )
    }

    pub fn from_camera(c: &CameraModel) -> Self {
        let mut r = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                r[row * 3 + col] = c.rotation[(row, col)];
            }
        }
        Self {
            fx: c.intrinsics.fx,
            fy: c.intrinsics.fy,
            cx: c.intrinsics.cx,
            cy: c.intrinsics.cy,
            r,
            t: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

/// Contents of `scene.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub images: Vec<String>,
    pub depths: Vec<String>,
    pub confidences: Vec<String>,
    pub attentions: Vec<String>,
    pub cameras: Vec<CameraRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_masks: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_cameras: Option<Vec<CameraRecord>>,
}

fn check_count(what: &str, n: usize, frames: usize) -> Result<(), SceneError> {
    if n != frames {
        return Err(SceneError::Manifest(format!(
            "{what} lists {n} entries for {frames} frames"
        )));
    }
    Ok(())
}

impl SceneManifest {
    /// Parses and structurally validates a manifest. Tensor contents are
    /// checked later by [`load_scene`].
    pub fn from_json_slice(bytes: &[u8]) -> Result<Self, SceneError> {
        let m: SceneManifest = serde_json::from_slice(bytes)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.heads == 0 {
            return Err(SceneError::Manifest(
                "frames, height, width and heads must be positive".into(),
            ));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(SceneError::Manifest(format!(
                "patch {} must divide {}x{}",
                self.patch, self.height, self.width
            )));
        }
        check_count("images", self.images.len(), self.frames)?;
        check_count("depths", self.depths.len(), self.frames)?;
        check_count("confidences", self.confidences.len(), self.frames)?;
        check_count("attentions", self.attentions.len(), self.frames)?;
        check_count("cameras", self.cameras.len(), self.frames)?;
        if let Some(g) = &self.gt_masks {
            check_count("gt_masks", g.len(), self.frames)?;
        }
        if let Some(g) = &self.gt_cameras {
            check_count("gt_cameras", g.len(), self.frames)?;
        }
        let all_paths = self
            .images
            .iter()
            .chain(&self.depths)
            .chain(&self.confidences)
            .chain(&self.attentions)
            .chain(self.gt_masks.iter().flatten());
        for p in all_paths {
            let path = Path::new(p);
            if p.is_empty()
                || path.is_absolute()
                || path
                    .components()
                    .any(|c| matches!(c, std::path::Component::ParentDir))
            {
                return Err(SceneError::Manifest(format!(
                    "file path {p:?} must be relative and stay inside the bundle"
                )));
            }
        }
        for (i, c) in self.cameras.iter().chain(self.gt_cameras.iter().flatten()).enumerate() {
            c.to_camera()
                .map_err(|source| SceneError::Camera { index: i, source })?;
        }
        Ok(())
    }
}

/// A complete multi-view input package.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    /// H x W x 3, values in [0, 1].
    pub images: Vec<TensorMap>,
    /// H x W meters; 0 marks an invalid pixel.
    pub depths: Vec<TensorMap>,
    /// H x W confidence logits.
    pub confidence_logits: Vec<TensorMap>,
    /// heads x H/patch x W/patch.
    pub attention: Vec<TensorMap>,
    pub cameras: Vec<CameraModel>,
    pub gt_masks: Option<MaskStack>,
    pub gt_cameras: Option<Vec<CameraModel>>,
}

impl SceneBundle {
    pub fn frames(&self) -> usize {
        self.cameras.len()
    }

    pub fn patch_height(&self) -> usize {
        self.height / self.patch
    }

    pub fn patch_width(&self) -> usize {
        self.width / self.patch
    }

    #[inline]
    pub fn depth(&self, frame: usize, row: usize, col: usize) -> f32 {
        self.depths[frame].data()[row * self.width + col]
    }

    #[inline]
    pub fn color(&self, frame: usize, row: usize, col: usize) -> [f32; 3] {
        let base = (row * self.width + col) * 3;
        let d = self.images[frame].data();
        [d[base], d[base + 1], d[base + 2]]
    }

    /// Checks every cross-tensor invariant.
    pub fn validate(&self) -> Result<(), SceneError> {
        let t = self.frames();
        if t == 0 {
            return Err(SceneError::Manifest("bundle has no frames".into()));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(SceneError::Manifest(format!(
                "patch {} must divide {}x{}",
                self.patch, self.height, self.width
            )));
        }
        for (what, list) in [
            ("images", &self.images),
            ("depths", &self.depths),
            ("confidences", &self.confidence_logits),
            ("attentions", &self.attention),
        ] {
            check_count(what, list.len(), t)?;
        }
        let (h, w) = (self.height, self.width);
        let att_dims = vec![self.heads, self.patch_height(), self.patch_width()];
        for f in 0..t {
            expect_dims(&format!("image {f}"), &self.images[f], &[h, w, 3])?;
            expect_dims(&format!("depth {f}"), &self.depths[f], &[h, w])?;
            expect_dims(&format!("confidence {f}"), &self.confidence_logits[f], &[h, w])?;
            expect_dims(&format!("attention {f}"), &self.attention[f], &att_dims)?;
            check_values(&format!("image {f}"), &self.images[f], |v| {
                (0.0..=1.0).contains(&v)
            }, "values must lie in [0, 1]")?;
            check_values(&format!("depth {f}"), &self.depths[f], |v| {
                v.is_finite() && v >= 0.0
            }, "depths must be finite and non-negative")?;
            check_values(&format!("confidence {f}"), &self.confidence_logits[f], f32::is_finite,
                "logits must be finite")?;
            check_values(&format!("attention {f}"), &self.attention[f], f32::is_finite,
                "responses must be finite")?;
        }
        if let Some(gt) = &self.gt_masks {
            if gt.len() != t {
                return Err(SceneError::Manifest(format!(
                    "{} gt masks for {t} frames",
                    gt.len()
                )));
            }
            if let Some((mh, mw)) = gt.dims() {
                if (mh, mw) != (h, w) {
                    return Err(SceneError::Shape {
                        what: "gt mask".into(),
                        actual: vec![mh, mw],
                        expected: vec![h, w],
                    });
                }
            }
        }
        if let Some(gc) = &self.gt_cameras {
            check_count("gt_cameras", gc.len(), t)?;
        }
        Ok(())
    }
}

fn expect_dims(what: &str, t: &TensorMap, dims: &[usize]) -> Result<(), SceneError> {
    if t.dims() != dims {
        return Err(SceneError::Shape {
            what: what.to_string(),
            actual: t.dims().to_vec(),
            expected: dims.to_vec(),
        });
    }
    Ok(())
}

fn check_values(
    what: &str,
    t: &TensorMap,
    ok: impl Fn(f32) -> bool,
    msg: &str,
) -> Result<(), SceneError> {
    if t.data().iter().all(|&v| ok(v)) {
        Ok(())
    } else {
        Err(SceneError::Value {
            what: what.to_string(),
            msg: msg.to_string(),
        })
    }
}

fn load_tensor(dir: &Path, name: &str) -> Result<TensorMap, SceneError> {
    read_tensor(&dir.join(name)).map_err(|source| SceneError::Tensor {
        file: name.to_string(),
        source,
    })
}

pub fn read_manifest(dir: &Path) -> Result<SceneManifest, SceneError> {
    let path = dir.join(MANIFEST_NAME);
    let bytes = fs::read(&path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    SceneManifest::from_json_slice(&bytes)
}

/// Loads and fully validates the bundle in `dir`.
pub fn load_scene(dir: &Path) -> Result<SceneBundle, SceneError> {
    let m = read_manifest(dir)?;
    let load_all = |names: &[String]| -> Result<Vec<TensorMap>, SceneError> {
        names.iter().map(|n| load_tensor(dir, n)).collect()
    };
    let cameras = m
        .cameras
        .iter()
        .enumerate()
        .map(|(index, c)| c.to_camera().map_err(|source| SceneError::Camera { index, source }))
        .collect::<Result<Vec<_>, _>>()?;
    let gt_cameras = match &m.gt_cameras {
        Some(list) => Some(
            list.iter()
                .enumerate()
                .map(|(index, c)| {
                    c.to_camera().map_err(|source| SceneError::Camera { index, source })
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    let gt_masks = match &m.gt_masks {
        Some(names) => {
            let frames = names
                .iter()
                .map(|n| {
                    read_pgm(&dir.join(n)).map_err(|source| SceneError::Mask {
                        file: n.clone(),
                        source,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Some(MaskStack::new(frames).map_err(|source| SceneError::Mask {
                file: "gt_masks".into(),
                source,
            })?)
        }
        None => None,
    };
    let bundle = SceneBundle {
        height: m.height,
        width: m.width,
        heads: m.heads,
        patch: m.patch,
        images: load_all(&m.images)?,
        depths: load_all(&m.depths)?,
        confidence_logits: load_all(&m.confidences)?,
        attention: load_all(&m.attentions)?,
        cameras,
        gt_masks,
        gt_cameras,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes `bundle` into `dir` with canonical file names and returns the
/// manifest that was written.
pub fn save_scene(bundle: &SceneBundle, dir: &Path) -> Result<SceneManifest, SceneError> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|source| SceneError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let t = bundle.frames();
    let names = |prefix: &str, ext: &str| -> Vec<String> {
        (0..t).map(|f| format!("{prefix}_{f:03}.{ext}")).collect()
    };
    let manifest = SceneManifest {
        frames: t,
        height: bundle.height,
        width: bundle.width,
        heads: bundle.heads,
        patch: bundle.patch,
        images: names("image", "dmt"),
        depths: names("depth", "dmt"),
        confidences: names("confidence", "dmt"),
        attentions: names("attention", "dmt"),
        cameras: bundle.cameras.iter().map(CameraRecord::from_camera).collect(),
        gt_masks: bundle.gt_masks.as_ref().map(|_| names("gt_mask", "pgm")),
        gt_cameras: bundle
            .gt_cameras
            .as_ref()
            .map(|c| c.iter().map(CameraRecord::from_camera).collect()),
    };
    let put = |name: &str, tensor: &TensorMap| {
        write_tensor(tensor, &dir.join(name)).map_err(|source| SceneError::Tensor {
            file: name.to_string(),
            source,
        })
    };
    for f in 0..t {
        put(&manifest.images[f], &bundle.images[f])?;
        put(&manifest.depths[f], &bundle.depths[f])?;
        put(&manifest.confidences[f], &bundle.confidence_logits[f])?;
        put(&manifest.attentions[f], &bundle.attention[f])?;
    }
    if let (Some(gt), Some(names)) = (&bundle.gt_masks, &manifest.gt_masks) {
        for (mask, name) in gt.frames().iter().zip(names) {
            write_pgm(mask, &dir.join(name)).map_err(|source| SceneError::Mask {
                file: name.clone(),
                source,
            })?;
        }
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    let path: PathBuf = dir.join(MANIFEST_NAME);
    write_atomic(&path, &json).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(manifest)
}

//! Pinhole cameras, rigid and displaced reprojection, and epipolar residuals.
//!
//! Pixels use `(x, y) = (col, row)` with pixel centers at integer
//! coordinates. Poses map world to camera: `X_cam = R * X_world + t`.
//! Depth is the camera-frame z coordinate, not the ray length.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

/// Orthonormality and determinant tolerance for rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-5;
/// Points with camera depth at or below this are behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;
/// Relative baselines shorter than this are degenerate.
pub const MIN_BASELINE: f64 = 1e-9;

pub type Pixel = Vector2<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("focal lengths must be positive (fx={fx}, fy={fy})")]
    BadFocal { fx: f64, fy: f64 },
    #[error("non-finite camera parameter")]
    NonFinite,
    #[error("rotation not orthonormal: max |R^T R - I| = {0:.3e}")]
    NotOrthonormal(f64),
    #[error("rotation determinant {0} is not +1")]
    BadDeterminant(f64),
    #[error("point projects behind the camera (z = {0:.3e})")]
    BehindCamera(f64),
    #[error("zero baseline between cameras")]
    ZeroBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// `K^-1 [x, y, 1]^T`, a ray with unit z.
    #[inline]
    pub fn normalize(&self, px: &Pixel) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }

    /// Dehomogenizes `K * p` for a camera-frame point with positive z.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Pixel {
        Pixel::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }
}

/// Intrinsics plus a world-to-camera pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraModel {
    pub fn new(
        intrinsics: Intrinsics,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let Intrinsics { fx, fy, cx, cy } = intrinsics;
        if ![fx, fy, cx, cy].iter().all(|v| v.is_finite())
            || !rotation.iter().all(|v| v.is_finite())
            || !translation.iter().all(|v| v.is_finite())
        {
            return Err(GeometryError::NonFinite);
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::BadFocal { fx, fy });
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho > ROTATION_TOLERANCE {
            return Err(GeometryError::NotOrthonormal(ortho));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::BadDeterminant(det));
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
        })
    }

    /// Camera at the world origin looking down +z.
    pub fn identity(intrinsics: Intrinsics) -> Self {
        Self {
            intrinsics,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    #[inline]
    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    #[inline]
    pub fn camera_to_world(&self, y: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (y - self.translation)
    }

    /// World point seen at `px` with camera depth `depth`:
    /// `R^T (depth * K^-1 x - t)`.
    #[inline]
    pub fn unproject(&self, px: &Pixel, depth: f64) -> Vector3<f64> {
        self.camera_to_world(&(self.intrinsics.normalize(px) * depth))
    }

    /// Projects a world point; fails when it is not in front of the camera.
    pub fn project_world(&self, x: &Vector3<f64>) -> Result<Projection, GeometryError> {
        let y = self.world_to_camera(x);
        if y.z <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera(y.z));
        }
        Ok(Projection {
            pixel: self.intrinsics.project(&y),
            depth: y.z,
        })
    }
}

/// Pose taking reference-camera coordinates to target-camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    /// `R_rel = R_t R_r^T`, `t_rel = t_t - R_rel t_r`.
    pub fn between(reference: &CameraModel, target: &CameraModel) -> Self {
        let rotation = target.rotation * reference.rotation.transpose();
        let translation = target.translation - rotation * reference.translation;
        Self {
            rotation,
            translation,
        }
    }

    #[inline]
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }
}

/// A reprojected pixel with its depth in the target camera (z before
/// dehomogenization).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Pixel,
    pub depth: f64,
}

fn finish_projection(y: Vector3<f64>, k: &Intrinsics) -> Result<Projection, GeometryError> {
    if y.z <= MIN_DEPTH {
        return Err(GeometryError::BehindCamera(y.z));
    }
    Ok(Projection {
        pixel: k.project(&y),
        depth: y.z,
    })
}

/// Target-camera coordinates of the static point at `(x_r, depth)`.
fn rigid_target_point(
    x_r: &Pixel,
    depth: f64,
    reference: &CameraModel,
    target: &CameraModel,
) -> Vector3<f64> {
    let rel = RelativePose::between(reference, target);
    rel.apply(&(reference.intrinsics.normalize(x_r) * depth))
}

/// Rigid reprojection `K [R_rel * depth * K^-1 x_r + t_rel]`.
pub fn project_rigid(
    x_r: &Pixel,
    depth: f64,
    reference: &CameraModel,
    target: &CameraModel,
) -> Result<Projection, GeometryError> {
    let y = rigid_target_point(x_r, depth, reference, target);
    finish_projection(y, &target.intrinsics)
}

/// Rigid reprojection plus a displacement `m` (meters, target-camera
/// frame) added before dehomogenization.
pub fn project_dynamic(
    x_r: &Pixel,
    depth: f64,
    reference: &CameraModel,
    target: &CameraModel,
    m: &Vector3<f64>,
) -> Result<Projection, GeometryError> {
    let y = rigid_target_point(x_r, depth, reference, target) + m;
    finish_projection(y, &target.intrinsics)
}

/// Skew-symmetric matrix with `skew(a) * b = a x b`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix {
    pub matrix: Matrix3<f64>,
}

impl EssentialMatrix {
    /// `E = [t]_x R` for a relative pose.
    pub fn from_relative(rel: &RelativePose) -> Result<Self, GeometryError> {
        if rel.translation.norm() <= MIN_BASELINE {
            return Err(GeometryError::ZeroBaseline);
        }
        Ok(Self {
            matrix: skew(&rel.translation) * rel.rotation,
        })
    }

    /// Singular values in descending order.
    pub fn singular_values(&self) -> [f64; 3] {
        let mut s: Vec<f64> = self.matrix.singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        [s[0], s[1], s[2]]
    }

    /// `sigma_3 / sigma_1`, zero for an exact rank-2 matrix.
    pub fn rank_deficiency(&self) -> f64 {
        let s = self.singular_values();
        s[2] / s[0]
    }

    /// Epipolar line `E x_r` in target normalized coordinates.
    pub fn line(&self, xhat_r: &Vector3<f64>) -> Vector3<f64> {
        self.matrix * xhat_r
    }

    pub fn transpose(&self) -> Self {
        Self {
            matrix: self.matrix.transpose(),
        }
    }
}

pub fn essential_from_poses(
    reference: &CameraModel,
    target: &CameraModel,
) -> Result<EssentialMatrix, GeometryError> {
    EssentialMatrix::from_relative(&RelativePose::between(reference, target))
}

/// Signed bilinear form `xhat_t^T E xhat_r` on normalized homogeneous
/// coordinates.
#[inline]
pub fn epipolar_residual_normalized(
    xhat_r: &Vector3<f64>,
    xhat_t: &Vector3<f64>,
    e: &EssentialMatrix,
) -> f64 {
    xhat_t.dot(&(e.matrix * xhat_r))
}

/// Signed epipolar residual of a pixel correspondence, evaluated after
/// mapping both pixels through `K^-1`.
pub fn epipolar_residual(x_r: &Pixel, x_t: &Pixel, e: &EssentialMatrix, k: &Intrinsics) -> f64 {
    epipolar_residual_normalized(&k.normalize(x_r), &k.normalize(x_t), e)
}

/// Rotation about the y axis by `angle` radians.
pub fn rotation_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Rotation from an axis-angle vector (Rodrigues).
pub fn rotation_from_axis_angle(v: &Vector3<f64>) -> Matrix3<f64> {
    let angle = v.norm();
    if angle < 1e-15 {
        return Matrix3::identity();
    }
    *nalgebra::Rotation3::from_scaled_axis(*v).matrix()
}

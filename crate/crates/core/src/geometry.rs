//! Pinhole cameras, camera-to-world poses, projection and pose error metrics.

use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

/// A 3-D point in world coordinates (scene units).
pub type SceneCoordinate = Point3<f64>;

/// Camera-frame depth at or below which a point is treated as behind the camera.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not a proper orthonormal matrix (deviation {0:e})")]
    InvalidRotation(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Pinhole calibration. Pixel coordinates are continuous with the image covering
/// `[0, width) x [0, height)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with the principal point at the image centre.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let vals = [self.fx, self.fy, self.cx, self.cy];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("intrinsics"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// True when the pixel lies inside the image, allowing `slack` pixels of
    /// tolerance on every side.
    pub fn contains(&self, kp: Keypoint, slack: f64) -> bool {
        kp.u >= -slack && kp.v >= -slack && kp.u < self.width as f64 + slack && kp.v < self.height as f64 + slack
    }

    /// Normalised ray direction (z = 1) through a pixel.
    pub fn ray(&self, kp: Keypoint) -> Vector3<f64> {
        Vector3::new((kp.u - self.cx) / self.fx, (kp.v - self.cy) / self.fy, 1.0)
    }
}

/// Pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
}

impl Keypoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Rigid camera-to-world transform: `x_world = rotation * x_cam + translation`.
///
/// The unit quaternion a pose was built from is kept alongside the matrix so
/// that writing and re-reading a pose file reproduces it bit for bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    quat: UnitQuaternion<f64>,
}

impl Pose {
    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// determinant +1 to within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("pose"));
        }
        let dev = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det_dev = (rotation.determinant() - 1.0).abs();
        if dev > ORTHONORMAL_TOL || det_dev > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidRotation(dev.max(det_dev)));
        }
        Ok(Self::from_matrix_unchecked(rotation, translation))
    }

    fn from_matrix_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
            quat: UnitQuaternion::from_matrix(&rotation),
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            quat: UnitQuaternion::identity(),
        }
    }

    pub fn from_parts(rotation: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rotation.to_rotation_matrix().into_inner(),
            translation,
            quat: *rotation,
        }
    }

    /// Rebuilds the pose from its quaternion so the matrix and quaternion agree
    /// exactly with what a pose file would reproduce.
    pub fn canonical(&self) -> Self {
        Self::from_parts(&self.quat, self.translation)
    }

    /// Projects an arbitrary 3x3 matrix onto SO(3) and builds a pose from it.
    pub fn from_approx_rotation(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let r = Rotation3::from_matrix(rotation);
        Self::from_matrix_unchecked(r.into_inner(), translation)
    }

    /// Camera-to-world pose from a world-to-camera rotation and translation
    /// (`x_cam = r * x_world + t`).
    pub fn from_world_to_camera(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix(r).into_inner();
        Self::from_matrix_unchecked(rot.transpose(), -(rot.transpose() * t))
    }

    /// Camera looking from `eye` towards `target` with the image `v` axis
    /// pointing roughly along `down`.
    pub fn look_at(eye: &Point3<f64>, target: &Point3<f64>, down: &Vector3<f64>) -> Result<Self, GeometryError> {
        let z = (target - eye).normalize();
        let x = down.cross(&z);
        if x.norm() < 1e-9 {
            return Err(GeometryError::InvalidRotation(1.0));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rot = Matrix3::from_columns(&[x, y, z]);
        Pose::new(rot, eye.coords)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(self.translation)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        self.quat
    }

    /// Maps a world point into the camera frame.
    pub fn world_to_camera(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p.coords - self.translation)
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p + self.translation)
    }

    /// `other ∘ self`: applies `self`, then `other`.
    pub fn then(&self, other: &Pose) -> Pose {
        Self::from_parts(
            &(other.quat * self.quat),
            other.rotation * self.translation + other.translation,
        )
    }

    /// Applies this pose as a rigid transform to a point.
    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }
}

/// Projects a world point into the image. Fails with `BehindCamera` when the
/// camera-frame depth is at most [`MIN_PROJECTION_DEPTH`].
pub fn project(point: &SceneCoordinate, pose: &Pose, k: &CameraIntrinsics) -> Result<Keypoint, GeometryError> {
    project_camera(&pose.world_to_camera(point), k)
}

/// Projects a camera-frame point.
pub fn project_camera(pc: &Vector3<f64>, k: &CameraIntrinsics) -> Result<Keypoint, GeometryError> {
    if pc.z <= MIN_PROJECTION_DEPTH {
        return Err(GeometryError::BehindCamera { depth: pc.z });
    }
    Ok(Keypoint::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy))
}

/// Lifts a pixel to the world point at camera-frame depth `depth`.
pub fn unproject(
    pixel: Keypoint,
    depth: f64,
    k: &CameraIntrinsics,
    pose: &Pose,
) -> Result<SceneCoordinate, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(pose.camera_to_world(&(k.ray(pixel) * depth)))
}

/// Pixel distance between `kp` and the projection of `coord`.
pub fn reprojection_residual(
    coord: &SceneCoordinate,
    kp: Keypoint,
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Result<f64, GeometryError> {
    Ok(project(coord, pose, k)?.distance(&kp))
}

/// Translation (scene units) and rotation (degrees) error between two poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    pub translation: f64,
    pub rotation_deg: f64,
}

impl PoseError {
    pub fn within(&self, max_translation: f64, max_rotation_deg: f64) -> bool {
        self.translation <= max_translation && self.rotation_deg <= max_rotation_deg
    }
}

pub fn pose_error(estimate: &Pose, truth: &Pose) -> PoseError {
    let translation = (estimate.translation - truth.translation).norm();
    let rel = estimate.rotation.transpose() * truth.rotation;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    PoseError {
        translation,
        rotation_deg: cos.acos().to_degrees(),
    }
}

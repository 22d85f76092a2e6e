//! Pinhole cameras, rigid poses and viewing rays.
//!
//! Poses map canonical-frame points into the camera frame (world-to-camera):
//! `x_cam = R·x + t`. Depth maps hold z-depth, the camera-frame z of the
//! surface point. Pixel `(u, v)` is column `u`, row `v`, sampled at the integer
//! location.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orthonormality tolerance applied when validating externally supplied poses.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Intrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn identity() -> Self {
        Intrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Geometry(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Read a zero-skew 3×3 calibration matrix.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        let tol = 1e-12;
        if m[(0, 1)].abs() > tol
            || m[(1, 0)].abs() > tol
            || m[(2, 0)].abs() > tol
            || m[(2, 1)].abs() > tol
            || (m[(2, 2)] - 1.0).abs() > tol
        {
            return Err(Error::Geometry(format!("not a zero-skew pinhole matrix: {m}")));
        }
        Intrinsics::new(m[(0, 0)], m[(1, 1)], m[(0, 2)], m[(1, 2)])
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse(&self) -> Matrix3<f64> {
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

    /// `diag(sx, sy, 1)·K`, the calibration of the same camera with its image
    /// resampled by `sx` horizontally and `sy` vertically.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Intrinsics { fx: self.fx * sx, fy: self.fy * sy, cx: self.cx * sx, cy: self.cy * sy }
    }
}

/// Rigid transform `[R t; 0 1]` from the canonical frame into a camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation, ROTATION_TOLERANCE)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Geometry(format!("non-finite translation {translation:?}")));
        }
        Ok(Pose { rotation, translation })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose { rotation: Matrix3::identity(), translation: t }
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Geometry(format!("last row must be [0 0 0 1], got {bottom:?}")));
        }
        Pose::new(m.fixed_view::<3, 3>(0, 0).into_owned(), m.fixed_view::<3, 1>(0, 3).into_owned())
    }

    /// Row-major 4×4 values.
    pub fn from_row_major(v: &[f64; 16]) -> Result<Self> {
        Pose::from_matrix(&Matrix4::from_row_slice(v))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self · other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Position of the camera in the canonical frame, `-Rᵀt`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.matrix() - other.matrix()).abs().max()
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// Largest entry of `|RᵀR − I|` and `|det R − 1|`.
pub fn rotation_error(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    ortho.max((r.determinant() - 1.0).abs())
}

fn check_rotation(r: &Matrix3<f64>, tol: f64) -> Result<()> {
    let err = rotation_error(r);
    if !(err <= tol) {
        return Err(Error::Geometry(format!("matrix is not a rotation (error {err:.3e})")));
    }
    Ok(())
}

/// `Ti⁻¹ · Tk`
pub fn relative_pose(ti: &Pose, tk: &Pose) -> Pose {
    ti.inverse().compose(tk)
}

pub fn invert_pose(t: &Pose) -> Pose {
    t.inverse()
}

/// Rotation from intrinsic X, then Y, then Z Euler angles: `Rx(φ)·Ry(θ)·Rz(ψ)`.
pub fn euler_to_rotation(phi: f64, theta: f64, psi: f64) -> Matrix3<f64> {
    let (sa, ca) = phi.sin_cos();
    let (sb, cb) = theta.sin_cos();
    let (sc, cc) = psi.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, ca, -sa, 0.0, sa, ca);
    let ry = Matrix3::new(cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb);
    let rz = Matrix3::new(cc, -sc, 0.0, sc, cc, 0.0, 0.0, 0.0, 1.0);
    rx * ry * rz
}

/// Inverse of [`euler_to_rotation`] for `|θ| < π/2`.
pub fn rotation_to_euler(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let theta = r[(0, 2)].clamp(-1.0, 1.0).asin();
    let phi = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let psi = (-r[(0, 1)]).atan2(r[(0, 0)]);
    (phi, theta, psi)
}

/// World-to-camera pose at `position` whose optical (z) axis points at `target`.
/// Camera x is `z × up`, camera y is `z × x`, so with `up = (0,-1,0)` the image
/// y axis points along world +y. When the viewing direction is parallel to `up`,
/// world +z is used as the up axis instead (world +x if that is parallel too).
pub fn lookat_pose(position: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Result<Pose> {
    let forward = target - position;
    let dist = forward.norm();
    if !(dist > 1e-12) || !dist.is_finite() {
        return Err(Error::Geometry("look-at target coincides with position".into()));
    }
    let z = forward / dist;
    let candidates = [*up, Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 0.0)];
    let x = candidates
        .iter()
        .map(|u| z.cross(u))
        .find(|x| x.norm() > 1e-6)
        .ok_or_else(|| Error::Geometry("degenerate up vector".into()))?
        .normalize();
    let y = z.cross(&x);
    // Columns of the camera-to-world rotation are the camera axes.
    let cam_to_world = Matrix3::from_columns(&[x, y, z]);
    let rotation = cam_to_world.transpose();
    Ok(Pose { rotation, translation: -(rotation * position) })
}

/// Whether ray directions carry the additive camera translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RayMode {
    /// `r = (K R)⁻¹ [u v 1]ᵀ + t`
    #[default]
    Global,
    /// `r = (K R)⁻¹ [u v 1]ᵀ`
    Relative,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Visible { u: f64, v: f64, z: f64 },
    Behind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose) -> Self {
        Camera { intrinsics, pose }
    }

    pub fn with_pose(&self, pose: Pose) -> Self {
        Camera { intrinsics: self.intrinsics, pose }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Camera { intrinsics: self.intrinsics.scaled(sx, sy), pose: self.pose }
    }

    /// Ray origin `-R t` and direction `(K R)⁻¹ [u v 1]ᵀ (+ t)`.
    pub fn ray(&self, u: f64, v: f64, mode: RayMode) -> Ray {
        let r = self.pose.rotation();
        let t = self.pose.translation();
        // (K R)⁻¹ = Rᵀ K⁻¹ for a rotation R.
        let mut direction = r.transpose() * (self.intrinsics.inverse() * Vector3::new(u, v, 1.0));
        if mode == RayMode::Global {
            direction += t;
        }
        Ray { origin: -(r * t), direction }
    }

    /// Canonical-frame point seen at pixel `(u, v)` with z-depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(Error::Geometry(format!("unproject needs positive depth, got {depth}")));
        }
        let k = &self.intrinsics;
        let cam = Vector3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
        Ok(self.pose.rotation().transpose() * (cam - self.pose.translation()))
    }

    pub fn project(&self, p: &Vector3<f64>) -> Projection {
        let c = self.pose.transform_point(p);
        if !(c.z > 0.0) {
            return Projection::Behind;
        }
        let k = &self.intrinsics;
        Projection::Visible { u: k.fx * c.x / c.z + k.cx, v: k.fy * c.y / c.z + k.cy, z: c.z }
    }
}

/// Free-function form of [`Camera::ray`] with global rays.
pub fn compute_ray(cam: &Camera, u: f64, v: f64) -> Ray {
    cam.ray(u, v, RayMode::Global)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloudPoint {
    pub xyz: Vector3<f64>,
    pub rgb: [f64; 3],
    pub source: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vector3::zeros(), |acc, p| acc + p.xyz);
        Some(sum / self.points.len() as f64)
    }

    pub fn extend(&mut self, other: PointCloud) {
        self.points.extend(other.points);
    }
}

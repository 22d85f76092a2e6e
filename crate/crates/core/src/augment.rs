//! Geometric 3D augmentations.
//!
//! Canonical jittering and canonical randomization change the reference frame of
//! a whole camera set without changing where the cameras are relative to each
//! other. Virtual cameras add supervision from viewpoints nobody captured, with
//! sparse ground truth obtained by splatting the unprojected RGB-D of the real
//! views into them.

use nalgebra::Vector3;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{euler_to_rotation, lookat_pose, Camera, CloudPoint, PointCloud, Pose, Projection};
use crate::rng::Rng;

/// World up used when aiming virtual cameras (image y points down).
pub const LOOKAT_UP: [f64; 3] = [0.0, -1.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub virtual_cameras: bool,
    /// Virtual cameras per training sample.
    pub virtual_count: usize,
    /// Std of the virtual camera position noise (m).
    pub virtual_translation_std: f64,
    /// Std of the look-at target noise (m).
    pub center_std: f64,
    pub jitter: bool,
    /// Std of the canonical translation noise (m).
    pub jitter_translation_std: f64,
    /// Std of the canonical Euler angle noise (rad).
    pub jitter_rotation_std: f64,
    pub randomize_canonical: bool,
    /// Half-size of the square splat written per projected point; 0 is one pixel.
    pub splat_radius: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            virtual_cameras: true,
            virtual_count: 1,
            virtual_translation_std: 0.25,
            center_std: 0.25,
            jitter: true,
            jitter_translation_std: 1.0,
            jitter_rotation_std: 0.1,
            randomize_canonical: true,
            splat_radius: 0,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation switched off.
    pub fn disabled() -> Self {
        AugmentConfig { virtual_cameras: false, jitter: false, randomize_canonical: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let stds = [
            self.virtual_translation_std,
            self.center_std,
            self.jitter_translation_std,
            self.jitter_rotation_std,
        ];
        if stds.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("augmentation stds must be finite and ≥ 0: {stds:?}")));
        }
        Ok(())
    }
}

fn normal3(rng: &mut Rng, std: f64) -> Vector3<f64> {
    let n = Normal::new(0.0, std).expect("std validated as finite and ≥ 0");
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// Perturb the canonical frame by one random rigid transform
/// `T₀' = [R(ε_r) ε_t; 0 1]` shared by all cameras.
///
/// The jitter acts on camera-to-world poses, `(Tᵢ⁻¹)' = T₀'·Tᵢ⁻¹`, which for the
/// world-to-camera poses stored here is `Tᵢ' = Tᵢ·T₀'⁻¹`. Images stay consistent
/// with their poses and every `Tᵢ'·Tₖ'⁻¹` is unchanged. Returns the new poses and `T₀'`.
pub fn canonical_jitter(poses: &[Pose], translation_std: f64, rotation_std: f64, rng: &mut Rng) -> (Vec<Pose>, Pose) {
    let t = normal3(rng, translation_std);
    let r = normal3(rng, rotation_std);
    let jitter = Pose::new(euler_to_rotation(r.x, r.y, r.z), t).expect("Euler rotations are orthonormal");
    let inv = jitter.inverse();
    (poses.iter().map(|p| p.compose(&inv)).collect(), jitter)
}

/// Re-express all poses relative to a uniformly chosen member `o`:
/// `Tᵢ' = Tᵢ·T_o⁻¹`. Returns the new poses and `o`.
pub fn canonical_randomize(poses: &[Pose], rng: &mut Rng) -> (Vec<Pose>, usize) {
    if poses.is_empty() {
        return (Vec::new(), 0);
    }
    let o = rng.random_range(0..poses.len());
    (rebase(poses, o), o)
}

/// `Tᵢ·T_o⁻¹` for every pose; camera `o` becomes the identity.
pub fn rebase(poses: &[Pose], o: usize) -> Vec<Pose> {
    let inv = poses[o].inverse();
    poses
        .iter()
        .enumerate()
        .map(|(i, p)| if i == o { Pose::identity() } else { p.compose(&inv) })
        .collect()
}

/// Borrowed RGB-D view: row-major `rgb` (3 per pixel) and z-depth (0 = invalid).
#[derive(Clone, Copy, Debug)]
pub struct RgbdView<'a> {
    pub camera: Camera,
    pub height: usize,
    pub width: usize,
    pub rgb: &'a [f64],
    pub depth: &'a [f64],
}

impl RgbdView<'_> {
    pub fn valid_pixels(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }

    /// Canonical-frame points of every valid depth pixel, tagged with `source`.
    pub fn unproject(&self, source: usize) -> PointCloud {
        let mut points = Vec::with_capacity(self.valid_pixels());
        for (i, &d) in self.depth.iter().enumerate() {
            if d > 0.0 {
                let (u, v) = ((i % self.width) as f64, (i / self.width) as f64);
                let xyz = self.camera.unproject(u, v, d).expect("depth checked positive");
                let rgb = [self.rgb[3 * i], self.rgb[3 * i + 1], self.rgb[3 * i + 2]];
                points.push(CloudPoint { xyz, rgb, source });
            }
        }
        PointCloud { points }
    }
}

/// Sample a virtual camera near a randomly chosen view that has valid depth.
///
/// Its position is the source camera center plus `N(0, translation_std)` noise and
/// it looks at the centroid of the source view's point cloud plus
/// `N(0, center_std)` noise. Intrinsics are copied from the source.
pub fn sample_virtual_camera(
    views: &[RgbdView<'_>],
    translation_std: f64,
    center_std: f64,
    rng: &mut Rng,
) -> Result<Camera> {
    let usable: Vec<usize> = (0..views.len()).filter(|&i| views[i].valid_pixels() > 0).collect();
    if usable.is_empty() {
        return Err(Error::Data("no view with valid depth to place a virtual camera".into()));
    }
    let source = &views[usable[rng.random_range(0..usable.len())]];
    let position = source.camera.pose.center() + normal3(rng, translation_std);
    let centroid = source.unproject(0).centroid().expect("view has valid pixels");
    let target = centroid + normal3(rng, center_std);
    let up = Vector3::from(LOOKAT_UP);
    let pose = match lookat_pose(&position, &target, &up) {
        Ok(p) => p,
        // Noise landed the target on the position; look at the noiseless centroid.
        Err(_) => lookat_pose(&position, &centroid, &up)?,
    };
    Ok(Camera::new(source.camera.intrinsics, pose))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VirtualPixel {
    /// Row-major pixel index.
    pub index: usize,
    pub rgb: [f64; 3],
    pub depth: f64,
}

/// Sparse ground truth rendered into a virtual camera.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualFrame {
    pub camera: Camera,
    pub height: usize,
    pub width: usize,
    /// Covered pixels in increasing index order.
    pub pixels: Vec<VirtualPixel>,
}

impl VirtualFrame {
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.pixels.iter().map(|p| p.index).collect()
    }

    pub fn depths(&self) -> Vec<f64> {
        self.pixels.iter().map(|p| p.depth).collect()
    }

    pub fn colors(&self) -> Vec<f64> {
        self.pixels.iter().flat_map(|p| p.rgb).collect()
    }

    /// Dense depth map with zeros where nothing landed.
    pub fn dense_depth(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.height * self.width];
        for p in &self.pixels {
            d[p.index] = p.depth;
        }
        d
    }
}

/// Project the combined point cloud of all views into `camera` and keep the
/// nearest depth per pixel. Points behind the camera or outside the image are
/// dropped.
pub fn render_virtual_gt(
    views: &[RgbdView<'_>],
    camera: &Camera,
    height: usize,
    width: usize,
    splat_radius: usize,
) -> VirtualFrame {
    let mut cloud = PointCloud::default();
    for (i, v) in views.iter().enumerate() {
        cloud.extend(v.unproject(i));
    }
    render_cloud(&cloud, camera, height, width, splat_radius)
}

/// Z-buffer `cloud` into `camera`.
pub fn render_cloud(cloud: &PointCloud, camera: &Camera, height: usize, width: usize, splat_radius: usize) -> VirtualFrame {
    let mut zbuf = vec![f64::INFINITY; height * width];
    let mut color = vec![[0.0; 3]; height * width];
    let r = splat_radius as i64;
    for p in &cloud.points {
        let Projection::Visible { u, v, z } = camera.project(&p.xyz) else { continue };
        if !(u.is_finite() && v.is_finite()) {
            continue;
        }
        let (cu, cv) = (u.round(), v.round());
        if cu < -(r as f64) || cv < -(r as f64) || cu > (width as i64 + r) as f64 || cv > (height as i64 + r) as f64 {
            continue;
        }
        let (cu, cv) = (cu as i64, cv as i64);
        for dv in -r..=r {
            for du in -r..=r {
                let (x, y) = (cu + du, cv + dv);
                if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                    continue;
                }
                let idx = y as usize * width + x as usize;
                if z < zbuf[idx] {
                    zbuf[idx] = z;
                    color[idx] = p.rgb;
                }
            }
        }
    }
    let pixels = zbuf
        .iter()
        .enumerate()
        .filter(|(_, z)| z.is_finite())
        .map(|(index, &depth)| VirtualPixel { index, rgb: color[index], depth })
        .collect();
    VirtualFrame { camera: *camera, height, width, pixels }
}

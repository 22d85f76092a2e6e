//! Synthetic posed RGB-D scenes, their on-disk format and context sampling.
//!
//! A scene is the inside of an axis-aligned room holding a few boxes. Every
//! surface carries a 3D checker albedo; shading is albedo only, so colors are
//! view consistent. Cameras move on a horizontal arc and look at a fixed target.
//! Colors are quantized to `k/255` and depths to `f32` at generation time so a
//! save/load roundtrip is exact.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::LOOKAT_UP;
use crate::error::{Error, Result};
use crate::geometry::{lookat_pose, Camera, Intrinsics, Pose};
use crate::rng::{substream, Rng};
use crate::tensor::Tensor;

pub const DEPTH_MAGIC: &[u8; 4] = b"DFD1";
pub const MANIFEST_FORMAT: &str = "depthfield-dataset";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Focal length in pixels (both axes).
    pub focal: f64,
    /// Full room extents along x, y, z (m), centered on the origin. `+y` is the floor.
    pub room: [f64; 3],
    pub boxes: usize,
    /// Range of box edge lengths (m).
    pub box_size: [f64; 2],
    /// Range of horizontal distances from the room axis to box centers (m).
    pub box_radius: [f64; 2],
    /// Checker cell size (m).
    pub checker: f64,
    pub frames: usize,
    /// Radius of the horizontal camera arc (m).
    pub arc_radius: f64,
    /// Angle swept by the arc over the whole trajectory (rad).
    pub arc_span: f64,
    /// Std of per-frame position noise (m).
    pub jitter: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 48,
            width: 64,
            focal: 48.0,
            room: [6.0, 3.0, 6.0],
            boxes: 4,
            box_size: [0.4, 1.0],
            box_radius: [1.3, 2.2],
            checker: 0.3,
            frames: 60,
            arc_radius: 0.8,
            arc_span: 1.0,
            jitter: 0.01,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return bad(format!("image size {}×{} must be positive multiples of 8", self.height, self.width));
        }
        if !(self.focal > 0.0) || self.room.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return bad("focal length and room extents must be positive".into());
        }
        if self.frames < 2 {
            return bad(format!("a trajectory needs at least 2 frames, got {}", self.frames));
        }
        let half_min = 0.5 * self.room[0].min(self.room[2]);
        if !(self.arc_radius > 0.0) || self.arc_radius + 4.0 * self.jitter >= half_min {
            return bad(format!("camera arc radius {} does not fit in the room", self.arc_radius));
        }
        if !(self.jitter >= 0.0) || !(self.arc_span.is_finite()) || !(self.checker > 0.0) {
            return bad("jitter, arc span and checker size must be finite and non-negative".into());
        }
        let [s0, s1] = self.box_size;
        let [r0, r1] = self.box_radius;
        if !(0.0 < s0 && s0 <= s1 && s1 < self.room[1]) || !(0.0 <= r0 && r0 <= r1) {
            return bad("box size and radius ranges must be ordered and positive".into());
        }
        let reach = r1 + s1 * std::f64::consts::FRAC_1_SQRT_2;
        if self.boxes > 0 && reach >= half_min {
            return bad("boxes do not fit inside the room".into());
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: 0.5 * (self.width as f64 - 1.0),
            cy: 0.5 * (self.height as f64 - 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene: SceneSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { seed: 0, train_scenes: 8, test_scenes: 2, scene: SceneSpec::default() }
    }
}

impl DatasetSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: DatasetSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_scenes + self.test_scenes == 0 {
            return Err(Error::Config("dataset has no scenes".into()));
        }
        self.scene.validate()
    }
}

/// Axis-aligned box, `min < max` per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surface {
    pub aabb: Aabb,
    /// Rays hit the inside of the room and the outside of boxes.
    pub inside: bool,
    pub albedo: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter of the hit; equals z-depth for rays with unit camera-z.
    pub t: f64,
    pub surface: usize,
}

/// Parameter interval `[t_near, t_far]` where the ray lies inside the box.
fn slab(aabb: &Aabb, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < aabb.min[a] || origin[a] > aabb.max[a] {
                return None;
            }
            continue;
        }
        let t0 = (aabb.min[a] - origin[a]) / dir[a];
        let t1 = (aabb.max[a] - origin[a]) / dir[a];
        lo = lo.max(t0.min(t1));
        hi = hi.min(t0.max(t1));
    }
    (lo <= hi).then_some((lo, hi))
}

/// Geometry and albedo of one room.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGeometry {
    pub surfaces: Vec<Surface>,
    pub checker: f64,
}

impl SceneGeometry {
    /// Nearest hit with `t > 0`.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, s) in self.surfaces.iter().enumerate() {
            let Some((lo, hi)) = slab(&s.aabb, origin, dir) else { continue };
            let t = if s.inside { hi } else if lo > 0.0 { lo } else { continue };
            if t > 0.0 && best.is_none_or(|b| t < b.t) {
                best = Some(Hit { t, surface: i });
            }
        }
        best
    }

    /// Checker-modulated albedo at a surface point.
    pub fn color(&self, surface: usize, p: &Vector3<f64>) -> [f64; 3] {
        // The phase keeps cell boundaries off the axis-aligned faces.
        let cell = |x: f64| ((x + 0.1234) / self.checker).floor() as i64;
        let parity = (cell(p.x) + cell(p.y) + cell(p.z)).rem_euclid(2);
        let shade = if parity == 0 { 1.0 } else { 0.55 };
        self.surfaces[surface].albedo.map(|c| c * shade)
    }
}

fn quantize_color(c: f64) -> f64 {
    (c.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// One rendered frame. `rgb` is `H×W×3` row-major in `[0, 1]`; `depth` is `H×W`
/// z-depth with 0 marking invalid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl FrameRecord {
    pub fn camera(&self) -> Camera {
        Camera::new(self.intrinsics, self.pose)
    }

    pub fn image(&self) -> Tensor {
        Tensor::new([self.height, self.width, 3], self.rgb.clone()).expect("frame buffers match their extents")
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.rgb.len() != 3 * n || self.depth.len() != n {
            return Err(Error::Data(format!("frame {} buffers do not match {}×{}", self.index, self.height, self.width)));
        }
        if self.depth.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::Data(format!("frame {} has negative or non-finite depth", self.index)));
        }
        if self.rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Data(format!("frame {} has colors outside [0, 1]", self.index)));
        }
        self.intrinsics.validate()?;
        Pose::new(*self.pose.rotation(), *self.pose.translation())?;
        Ok(())
    }
}

/// Render one frame by casting a ray through every integer pixel location.
pub fn render_frame(geometry: &SceneGeometry, camera: &Camera, height: usize, width: usize, index: usize) -> FrameRecord {
    let kinv = camera.intrinsics.inverse();
    let rt = camera.pose.rotation().transpose();
    let origin = camera.pose.center();
    let mut rgb = vec![0.0; height * width * 3];
    let mut depth = vec![0.0; height * width];
    for v in 0..height {
        for u in 0..width {
            // Camera-frame direction has unit z, so the ray parameter is z-depth.
            let dir = rt * (kinv * Vector3::new(u as f64, v as f64, 1.0));
            let Some(hit) = geometry.raycast(&origin, &dir) else { continue };
            let i = v * width + u;
            depth[i] = f64::from(hit.t as f32);
            let c = geometry.color(hit.surface, &(origin + dir * hit.t));
            for k in 0..3 {
                rgb[3 * i + k] = quantize_color(c[k]);
            }
        }
    }
    FrameRecord { index, height, width, rgb, depth, intrinsics: camera.intrinsics, pose: camera.pose }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub name: String,
    pub frames: Vec<FrameRecord>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn random_albedo(rng: &mut Rng) -> [f64; 3] {
    [0.0; 3].map(|_: f64| rng.random_range(0.25..0.95))
}

/// Room and boxes for one scene.
pub fn build_geometry(spec: &SceneSpec, rng: &mut Rng) -> SceneGeometry {
    let half = Vector3::from(spec.room) * 0.5;
    let mut surfaces = vec![Surface { aabb: Aabb { min: -half, max: half }, inside: true, albedo: random_albedo(rng) }];
    for _ in 0..spec.boxes {
        let size = Vector3::from([0.0; 3].map(|_: f64| rng.random_range(spec.box_size[0]..=spec.box_size[1])));
        let radius = rng.random_range(spec.box_radius[0]..=spec.box_radius[1]);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        // Boxes rest on the floor at y = +half.y.
        let center = Vector3::new(radius * angle.cos(), half.y - 0.5 * size.y, radius * angle.sin());
        surfaces.push(Surface {
            aabb: Aabb { min: center - size * 0.5, max: center + size * 0.5 },
            inside: false,
            albedo: random_albedo(rng),
        });
    }
    SceneGeometry { surfaces, checker: spec.checker }
}

/// Camera poses along the arc, all aimed at a fixed target across the room.
pub fn trajectory(spec: &SceneSpec, rng: &mut Rng) -> Result<Vec<Pose>> {
    let start = rng.random_range(0.0..std::f64::consts::TAU);
    let height = rng.random_range(-0.2..0.2);
    let up = Vector3::from(LOOKAT_UP);
    let noise = rand_distr::Normal::new(0.0, spec.jitter).map_err(|e| Error::Config(e.to_string()))?;
    let last = (spec.frames - 1) as f64;
    (0..spec.frames)
        .map(|i| {
            let a = start + spec.arc_span * i as f64 / last;
            let mut jitter = || rand_distr::Distribution::sample(&noise, rng);
            let position = Vector3::new(spec.arc_radius * a.cos() + jitter(), height + jitter(), spec.arc_radius * a.sin() + jitter());
            // Look through the room axis toward the far wall.
            let target = Vector3::new(-2.0 * a.cos(), 0.3, -2.0 * a.sin());
            lookat_pose(&position, &target, &up)
        })
        .collect()
}

pub fn generate_scene(spec: &SceneSpec, seed: u64, name: &str) -> Result<Scene> {
    spec.validate()?;
    let mut rng = substream(seed, "scene");
    let geometry = build_geometry(spec, &mut rng);
    let poses = trajectory(spec, &mut rng)?;
    let k = spec.intrinsics();
    let frames = poses
        .iter()
        .enumerate()
        .map(|(i, p)| render_frame(&geometry, &Camera::new(k, *p), spec.height, spec.width, i))
        .collect();
    Ok(Scene { name: name.to_string(), frames })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub name: String,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub scenes: Vec<SceneEntry>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format != MANIFEST_FORMAT || self.version != MANIFEST_VERSION {
            return Err(Error::Data(format!("unsupported manifest {} v{}", self.format, self.version)));
        }
        for name in &self.train {
            if self.test.contains(name) {
                return Err(Error::Data(format!("scene {name} is listed in both train and test")));
            }
        }
        for name in self.train.iter().chain(&self.test) {
            if !self.scenes.iter().any(|s| &s.name == name) {
                return Err(Error::Data(format!("split lists unknown scene {name}")));
            }
            if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
                return Err(Error::Data(format!("invalid scene name {name:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn scene(&self, name: &str) -> Result<&Scene> {
        self.scenes
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Data(format!("no scene named {name}")))
    }

    pub fn split(&self, test: bool) -> Result<Vec<&Scene>> {
        let names = if test { &self.manifest.test } else { &self.manifest.train };
        names.iter().map(|n| self.scene(n)).collect()
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut scenes = Vec::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for i in 0..spec.train_scenes + spec.test_scenes {
        let name = format!("scene_{i:03}");
        let seed = rand::RngCore::next_u64(&mut substream(spec.seed, &name));
        scenes.push(generate_scene(&spec.scene, seed, &name)?);
        if i < spec.train_scenes { train.push(name) } else { test.push(name) }
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        height: spec.scene.height,
        width: spec.scene.width,
        scenes: scenes.iter().map(|s| SceneEntry { name: s.name.clone(), frames: s.len() }).collect(),
        train,
        test,
    };
    Ok(Dataset { manifest, scenes })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Binary P6 with maxval 255.
pub fn encode_ppm(height: usize, width: usize, rgb: &[f64]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::format(path, format!("expected P6 magic, found {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad header field {s:?}")));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    let data = &bytes[(pos + 1).min(bytes.len())..];
    let n = width * height * 3;
    if data.len() != n {
        return Err(Error::format(path, format!("expected {n} pixel bytes, found {}", data.len())));
    }
    Ok((height, width, data.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

/// `"DFD1"`, u32 height, u32 width, then little-endian f32 z-depths.
pub fn encode_depth(height: usize, width: usize, depth: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * depth.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for d in depth {
        out.extend_from_slice(&(*d as f32).to_le_bytes());
    }
    out
}

pub fn decode_depth(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
        return Err(Error::format(path, "missing DFD1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (height, width) = (word(4), word(8));
    let body = &bytes[12..];
    if body.len() != 4 * height * width {
        return Err(Error::format(path, format!("expected {} depth bytes, found {}", 4 * height * width, body.len())));
    }
    let depth = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Ok((height, width, depth))
}

fn format_floats(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
    parts.join(" ") + "\n"
}

fn parse_floats<const N: usize>(path: &Path, text: &str) -> Result<[f64; N]> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|_| Error::format(path, format!("not a number: {s:?}"))))
        .collect::<Result<_>>()?;
    values
        .try_into()
        .map_err(|v: Vec<f64>| Error::format(path, format!("expected {N} numbers, found {}", v.len())))
}

pub fn encode_pose(pose: &Pose) -> String {
    format_floats(&pose.to_row_major())
}

pub fn decode_pose(path: &Path, text: &str) -> Result<Pose> {
    let v = parse_floats::<16>(path, text)?;
    Pose::from_row_major(&v).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_pose(path: &Path) -> Result<Pose> {
    decode_pose(path, &read_text(path)?)
}

pub fn save_depth(path: &Path, height: usize, width: usize, depth: &[f64]) -> Result<()> {
    write_file(path, &encode_depth(height, width, depth))
}

pub fn load_depth(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_depth(path, &read_file(path)?)
}

pub fn save_ppm(path: &Path, height: usize, width: usize, rgb: &[f64]) -> Result<()> {
    write_file(path, &encode_ppm(height, width, rgb))
}

pub fn load_ppm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_ppm(path, &read_file(path)?)
}

pub fn frame_path(dir: &Path, index: usize, ext: &str) -> PathBuf {
    dir.join(format!("{index:06}.{ext}"))
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.manifest.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for scene in &dataset.scenes {
        let sdir = dir.join(&scene.name);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let k = scene.frames.first().map(|f| f.intrinsics).unwrap_or_else(Intrinsics::identity);
        let km = k.matrix();
        let kvals: Vec<f64> = (0..9).map(|i| km[(i / 3, i % 3)]).collect();
        write_file(&sdir.join("intrinsics.txt"), format_floats(&kvals).as_bytes())?;
        for f in &scene.frames {
            if f.intrinsics != k {
                return Err(Error::Data(format!("scene {} mixes intrinsics", scene.name)));
            }
            save_ppm(&frame_path(&sdir, f.index, "ppm"), f.height, f.width, &f.rgb)?;
            save_depth(&frame_path(&sdir, f.index, "depth"), f.height, f.width, &f.depth)?;
            write_file(&frame_path(&sdir, f.index, "pose"), encode_pose(&f.pose).as_bytes())?;
        }
    }
    let json = serde_json::to_string_pretty(&dataset.manifest).map_err(|e| Error::Data(e.to_string()))?;
    let path = dir.join("manifest.json");
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(file, "{json}").map_err(|e| Error::io(&path, e))
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let manifest: DatasetManifest =
        serde_json::from_str(&read_text(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn load_intrinsics(path: &Path) -> Result<Intrinsics> {
    let v = parse_floats::<9>(path, &read_text(path)?)?;
    let m = nalgebra::Matrix3::from_row_slice(&v);
    Intrinsics::from_matrix(&m).map_err(|e| Error::format(path, e.to_string()))
}

/// Frame `index` of the scene directory `dir`.
pub fn load_frame(dir: &Path, intrinsics: &Intrinsics, index: usize) -> Result<FrameRecord> {
    let (h, w, rgb) = load_ppm(&frame_path(dir, index, "ppm"))?;
    let dpath = frame_path(dir, index, "depth");
    let (dh, dw, depth) = load_depth(&dpath)?;
    if (dh, dw) != (h, w) {
        return Err(Error::format(&dpath, format!("depth is {dh}×{dw} but the image is {h}×{w}")));
    }
    let pose = load_pose(&frame_path(dir, index, "pose"))?;
    let frame = FrameRecord { index, height: h, width: w, rgb, depth, intrinsics: *intrinsics, pose };
    frame.validate().map_err(|e| Error::format(&dpath, e.to_string()))?;
    Ok(frame)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let mut scenes = Vec::new();
    for entry in &manifest.scenes {
        let sdir = dir.join(&entry.name);
        let intrinsics = load_intrinsics(&sdir.join("intrinsics.txt"))?;
        let mut frames = Vec::with_capacity(entry.frames);
        for index in 0..entry.frames {
            let frame = load_frame(&sdir, &intrinsics, index)?;
            if (frame.height, frame.width) != (manifest.height, manifest.width) {
                return Err(Error::format(frame_path(&sdir, index, "ppm"), "image size does not match the manifest"));
            }
            frames.push(frame);
        }
        scenes.push(Scene { name: entry.name.clone(), frames });
    }
    Ok(Dataset { manifest, scenes })
}

/// SHA-256 over every dataset file in a fixed order, as lowercase hex.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let manifest = load_manifest(dir)?;
    let mut files = vec![dir.join("manifest.json")];
    for entry in &manifest.scenes {
        let sdir = dir.join(&entry.name);
        files.push(sdir.join("intrinsics.txt"));
        for i in 0..entry.frames {
            for ext in ["ppm", "depth", "pose"] {
                files.push(frame_path(&sdir, i, ext));
            }
        }
    }
    let mut h = Sha256::new();
    for f in files {
        h.update(read_file(&f)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// Two frames `{t, t+s}`.
    #[default]
    Stereo,
    /// Target with context `{t−s, t, t+s}`.
    Video,
    /// Encode `{t−5, t+5}`, query `{t−4, …, t+4}`.
    Interpolate,
    /// Encode `{t−5, …, t−1}`, query `{t, …, t+8}`.
    Extrapolate,
}

/// Frames to encode and frames whose depth is supervised or evaluated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub target: usize,
    pub encode: Vec<usize>,
    pub query: Vec<usize>,
}

impl ContextMode {
    /// Offsets relative to `t` of the encoded and queried frames.
    fn offsets(self, stride: usize) -> (Vec<isize>, Vec<isize>) {
        let s = stride as isize;
        match self {
            ContextMode::Stereo => (vec![0, s], vec![0, s]),
            ContextMode::Video => (vec![-s, 0, s], vec![-s, 0, s]),
            ContextMode::Interpolate => (vec![-5, 5], (-4..=4).collect()),
            ContextMode::Extrapolate => ((-5..=-1).collect(), (0..=8).collect()),
        }
    }

    /// Valid range of `t` for a trajectory of `frames` frames.
    pub fn target_range(self, stride: usize, frames: usize) -> Option<(usize, usize)> {
        let (e, q) = self.offsets(stride);
        let lo = e.iter().chain(&q).copied().min()?;
        let hi = e.iter().chain(&q).copied().max()?;
        let first = (-lo).max(0) as usize;
        let last = frames as isize - 1 - hi;
        (last >= first as isize).then_some((first, last as usize))
    }

    pub fn sample_at(self, stride: usize, frames: usize, t: usize) -> Result<Sample> {
        if stride == 0 {
            return Err(Error::Config("context stride must be positive".into()));
        }
        let (first, last) = self
            .target_range(stride, frames)
            .ok_or_else(|| Error::Data(format!("{frames} frames are too few for {self:?} with stride {stride}")))?;
        if t < first || t > last {
            return Err(Error::Data(format!("target {t} outside [{first}, {last}] for {self:?}")));
        }
        let (e, q) = self.offsets(stride);
        let at = |o: &isize| (t as isize + o) as usize;
        Ok(Sample { target: t, encode: e.iter().map(at).collect(), query: q.iter().map(at).collect() })
    }

    /// Uniformly random target over the valid range.
    pub fn sample(self, stride: usize, frames: usize, rng: &mut Rng) -> Result<Sample> {
        let (first, last) = self
            .target_range(stride, frames)
            .ok_or_else(|| Error::Data(format!("{frames} frames are too few for {self:?} with stride {stride}")))?;
        self.sample_at(stride, frames, rng.random_range(first..=last))
    }
}

/// Draw a scene uniformly, then a sample inside it.
pub fn sample_batch<'d>(scenes: &[&'d Scene], mode: ContextMode, stride: usize, rng: &mut Rng) -> Result<(&'d Scene, Sample)> {
    if scenes.is_empty() {
        return Err(Error::Data("no scenes to sample from".into()));
    }
    let scene = scenes[rng.random_range(0..scenes.len())];
    Ok((scene, mode.sample(stride, scene.len(), rng)?))
}

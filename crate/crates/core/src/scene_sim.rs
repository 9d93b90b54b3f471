//! Procedural rooms built from colored surfels, a z-buffered splat renderer,
//! and the on-disk dataset layout.
//!
//! Opposite walls share their fine texture pattern (and so do rooms created
//! with the same `detail_seed`); only a faint low-frequency tint that
//! depends on the room seed tells them apart.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{backproject, CameraIntrinsics, GeometryError, RigidPose, SceneCoordinate, MIN_DEPTH};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene parameters: {0}")]
    Invalid(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Width of the margin between walls and the region cameras are placed in.
pub const WALL_CLEARANCE: f64 = 1.0;
/// Edge of the checkerboard cells that separate train and test positions.
pub const SPLIT_CELL: f64 = 0.5;
/// Depth PNG values meaning "no measurement".
pub const DEPTH_INVALID: [u16; 2] = [0, u16::MAX];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    /// Edge length of the cubic room in meters.
    pub extent: f64,
    /// Surfels per square meter of surface.
    pub surfel_density: f64,
    /// Drives surfel jitter, interior boxes and the low-frequency tint.
    pub seed: u64,
    /// Drives the fine texture; rooms sharing it repeat each other's walls.
    pub detail_seed: u64,
    /// World position of the room center.
    pub origin: [f64; 3],
}

impl RoomSpec {
    pub fn new(extent: f64, surfel_density: f64, seed: u64) -> Self {
        Self { extent, surfel_density, seed, detail_seed: seed, origin: [0.0; 3] }
    }

    pub fn desk() -> Self {
        Self::new(4.0, 2500.0, 1)
    }

    fn validate(&self) -> Result<(), SceneError> {
        if !(self.extent > 2.0 * WALL_CLEARANCE + SPLIT_CELL && self.extent.is_finite()) {
            return Err(SceneError::Invalid(format!(
                "extent {} m leaves no camera region (need > {} m)",
                self.extent,
                2.0 * WALL_CLEARANCE + SPLIT_CELL
            )));
        }
        if !(self.surfel_density > 0.0 && self.surfel_density.is_finite()) {
            return Err(SceneError::Invalid(format!("surfel density {} must be positive", self.surfel_density)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surfel {
    pub position: Vector3<f64>,
    /// Unit normal on the visible side.
    pub normal: Vector3<f64>,
    pub color: [u8; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: RoomSpec,
    pub surfels: Vec<Surfel>,
    pub bounds: Aabb,
    pub boxes: Vec<Aabb>,
}

/// Sum of sinusoids per channel; smooth, aperiodic across a room.
#[derive(Debug, Clone)]
struct Texture {
    /// (wave vector in rad/m, phase, amplitude) per channel.
    waves: [Vec<(Vector2<f64>, f64, f64)>; 3],
}

impl Texture {
    fn new(seed: u64, wavelengths: &[f64], amplitude: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channel = || {
            wavelengths
                .iter()
                .flat_map(|&l| [l, l * 1.37])
                .map(|l| {
                    let a = rng.gen_range(0.0..TAU);
                    let k = Vector2::new(a.cos(), a.sin()) * (TAU / l);
                    (k, rng.gen_range(0.0..TAU), amplitude * rng.gen_range(0.6..1.0))
                })
                .collect()
        };
        Self { waves: [channel(), channel(), channel()] }
    }

    fn eval(&self, uv: &Vector2<f64>) -> [f64; 3] {
        let f = |ws: &Vec<(Vector2<f64>, f64, f64)>| ws.iter().map(|(k, ph, a)| a * (k.dot(uv) + ph).sin()).sum();
        [f(&self.waves[0]), f(&self.waves[1]), f(&self.waves[2])]
    }
}

struct RoomTexture {
    /// Fine pattern per wall orientation (x, y, z), shared by opposite sides.
    detail: [Texture; 3],
    base: [[f64; 3]; 3],
    /// Room-specific low-frequency tint over 3D position.
    tint: [Texture; 3],
}

impl RoomTexture {
    fn new(spec: &RoomSpec) -> Self {
        let detail = [0u64, 1, 2].map(|a| Texture::new(mix(spec.detail_seed, 10 + a), &[1.2, 0.6, 0.3], 26.0));
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.detail_seed, 20));
        let base = [0, 1, 2].map(|_| [0, 1, 2].map(|_| rng.gen_range(90.0..165.0)));
        let tint = [0u64, 1, 2].map(|a| Texture::new(mix(spec.seed, 30 + a), &[5.0], 9.0));
        Self { detail, base, tint }
    }

    /// Color of a surface point whose normal is along `axis`.
    fn color(&self, p: &Vector3<f64>, axis: usize, origin: &Vector3<f64>) -> [u8; 3] {
        let local = p - origin;
        let (a, b) = [(1, 2), (0, 2), (0, 1)][axis];
        let d = self.detail[axis].eval(&Vector2::new(local[a], local[b]));
        // tint varies over the whole room: project position onto two planes
        let t0 = self.tint[axis].eval(&Vector2::new(local.x + local.z, local.y - local.z));
        [0, 1, 2].map(|c| (self.base[axis][c] + d[c] + t0[c]).round().clamp(0.0, 255.0) as u8)
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Surfels on an axis-aligned rectangle. `axis` is the normal axis, `at` the
/// plane coordinate, `lo`/`hi` the rectangle bounds on the other two axes.
#[allow(clippy::too_many_arguments)]
fn add_face(
    out: &mut Vec<Surfel>,
    rng: &mut ChaCha8Rng,
    tex: &RoomTexture,
    origin: &Vector3<f64>,
    axis: usize,
    at: f64,
    lo: [f64; 2],
    hi: [f64; 2],
    normal_sign: f64,
    spacing: f64,
) {
    let (a, b) = [(1, 2), (0, 2), (0, 1)][axis];
    let na = ((hi[0] - lo[0]) / spacing).ceil().max(1.0) as usize;
    let nb = ((hi[1] - lo[1]) / spacing).ceil().max(1.0) as usize;
    let (sa, sb) = ((hi[0] - lo[0]) / na as f64, (hi[1] - lo[1]) / nb as f64);
    let mut normal = Vector3::zeros();
    normal[axis] = normal_sign;
    for i in 0..na {
        for j in 0..nb {
            let mut p = Vector3::zeros();
            p[axis] = at;
            p[a] = (lo[0] + (i as f64 + 0.5 + rng.gen_range(-0.25..0.25)) * sa).clamp(lo[0], hi[0]);
            p[b] = (lo[1] + (j as f64 + 0.5 + rng.gen_range(-0.25..0.25)) * sb).clamp(lo[1], hi[1]);
            let color = tex.color(&p, axis, origin);
            // covers the worst-case gap of the jittered grid
            let radius = 1.1 * sa.max(sb);
            out.push(Surfel { position: p, normal, color, radius });
        }
    }
}

pub fn make_room(extent: f64, surfel_density: f64, seed: u64) -> Result<SyntheticScene, SceneError> {
    make_room_from(&RoomSpec::new(extent, surfel_density, seed))
}

/// Walls, floor and ceiling of a cube plus three boxes on the floor, all
/// low enough to stay below the camera region.
pub fn make_room_from(spec: &RoomSpec) -> Result<SyntheticScene, SceneError> {
    spec.validate()?;
    let origin = Vector3::from(spec.origin);
    let half = spec.extent / 2.0;
    let bounds = Aabb { min: origin.add_scalar(-half), max: origin.add_scalar(half) };
    let spacing = 1.0 / spec.surfel_density.sqrt();
    let tex = RoomTexture::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 1));
    let mut surfels = Vec::new();
    for axis in 0..3 {
        let (a, b) = [(1, 2), (0, 2), (0, 1)][axis];
        let lo = [bounds.min[a], bounds.min[b]];
        let hi = [bounds.max[a], bounds.max[b]];
        add_face(&mut surfels, &mut rng, &tex, &origin, axis, bounds.min[axis], lo, hi, 1.0, spacing);
        add_face(&mut surfels, &mut rng, &tex, &origin, axis, bounds.max[axis], lo, hi, -1.0, spacing);
    }
    let mut boxes = Vec::new();
    let max_height = WALL_CLEARANCE * 0.9;
    while boxes.len() < 3 {
        let size = Vector3::new(rng.gen_range(0.4..0.9), rng.gen_range(0.4..0.9), rng.gen_range(0.3..max_height));
        let cx = rng.gen_range(bounds.min.x + 0.05..bounds.max.x - 0.05 - size.x);
        let cy = rng.gen_range(bounds.min.y + 0.05..bounds.max.y - 0.05 - size.y);
        let min = Vector3::new(cx, cy, bounds.min.z);
        let b = Aabb { min, max: min + size };
        let overlaps = boxes.iter().any(|o: &Aabb| (0..2).all(|i| b.min[i] < o.max[i] + 0.1 && o.min[i] < b.max[i] + 0.1));
        if !overlaps {
            boxes.push(b);
        }
    }
    for b in &boxes {
        for axis in 0..3 {
            let (a, c) = [(1, 2), (0, 2), (0, 1)][axis];
            let lo = [b.min[a], b.min[c]];
            let hi = [b.max[a], b.max[c]];
            if axis != 2 {
                add_face(&mut surfels, &mut rng, &tex, &origin, axis, b.min[axis], lo, hi, -1.0, spacing);
            }
            add_face(&mut surfels, &mut rng, &tex, &origin, axis, b.max[axis], lo, hi, 1.0, spacing);
        }
    }
    Ok(SyntheticScene { spec: *spec, surfels, bounds, boxes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl SyntheticScene {
    /// Box cameras are placed in: the room shrunk by [`WALL_CLEARANCE`].
    pub fn camera_region(&self) -> Aabb {
        Aabb { min: self.bounds.min.add_scalar(WALL_CLEARANCE), max: self.bounds.max.add_scalar(-WALL_CLEARANCE) }
    }

    /// Which split owns a camera position: parity of its checkerboard cell.
    pub fn split_of(&self, p: &Vector3<f64>) -> Split {
        let rel = p - self.camera_region().min;
        let cell: i64 = (0..3).map(|i| (rel[i] / SPLIT_CELL).floor() as i64).sum();
        if cell.rem_euclid(2) == 0 {
            Split::Train
        } else {
            Split::Test
        }
    }
}

/// A camera inside the split's part of the camera region, looking at a
/// random point at least one meter away. Image y points down, world z up.
pub fn sample_pose(scene: &SyntheticScene, rng: &mut impl Rng, split: Split) -> RigidPose {
    let region = scene.camera_region();
    let position = loop {
        let p = Vector3::from_fn(|i, _| rng.gen_range(region.min[i]..region.max[i]));
        if scene.split_of(&p) == split {
            break p;
        }
    };
    let inner = Aabb { min: scene.bounds.min.add_scalar(0.1), max: scene.bounds.max.add_scalar(-0.1) };
    loop {
        let target = Vector3::from_fn(|i, _| rng.gen_range(inner.min[i]..inner.max[i]));
        let d = target - position;
        if d.norm() < 1.0 || (d.z / d.norm()).abs() > 0.8 {
            continue;
        }
        return look_at(&position, &target);
    }
}

/// Camera-to-world pose at `eye` facing `target` with world +z up.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> RigidPose {
    let z = (target - eye).normalize();
    let x = z.cross(&Vector3::z()).normalize();
    let y = z.cross(&x);
    RigidPose { rotation: Matrix3::from_columns(&[x, y, z]), translation: *eye }
}

/// One rendered RGB-D frame with per-pixel ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    /// `(3, H, W)` intensities in [0, 255].
    pub image: Tensor,
    /// Camera-frame z in meters, 0 where invalid; row-major.
    pub depth: Vec<f64>,
    /// Scene coordinate per pixel, NaN where invalid.
    pub gt_coords: Vec<SceneCoordinate>,
    pub valid: Vec<bool>,
    pub pose: RigidPose,
    pub intrinsics: CameraIntrinsics,
}

impl FrameSample {
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len().max(1) as f64
    }
}

/// Desk camera: 64x64 pixels, about 60 degrees field of view.
pub fn desk_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics { fx: 56.0, fy: 56.0, cx: 31.5, cy: 31.5, width: 64, height: 64 }
}

/// Splats every front-facing surfel whose disk a pixel ray pierces; the
/// nearest hit wins (lower surfel index on exact ties). The stored scene
/// coordinate is the ray's hit point on the winning disk.
pub fn render_frame(scene: &SyntheticScene, pose: &RigidPose, k: &CameraIntrinsics) -> FrameSample {
    let (w, h) = (k.width, k.height);
    let n = w * h;
    let mut zbuf = vec![f64::INFINITY; n];
    let mut hit = vec![Vector3::from_element(f64::NAN); n];
    let mut winner = vec![usize::MAX; n];
    let eye = pose.translation;
    let rot = pose.rotation;
    let fmax = k.fx.max(k.fy);
    for (si, s) in scene.surfels.iter().enumerate() {
        let to_eye = eye - s.position;
        if s.normal.dot(&to_eye) <= 0.0 {
            continue;
        }
        let pc = rot.tr_mul(&(s.position - eye));
        if pc.z - s.radius <= MIN_DEPTH {
            // the disk may straddle the image plane; test pixels exhaustively only if it can be seen
            if pc.z + s.radius <= MIN_DEPTH {
                continue;
            }
        }
        let (u0, u1, v0, v1) = if pc.z - s.radius > MIN_DEPTH {
            let u = k.fx * pc.x / pc.z + k.cx;
            let v = k.fy * pc.y / pc.z + k.cy;
            let r = fmax * s.radius / (pc.z - s.radius) + 1.0;
            (
                (u - r).floor().max(0.0),
                (u + r).ceil().min(w as f64 - 1.0),
                (v - r).floor().max(0.0),
                (v + r).ceil().min(h as f64 - 1.0),
            )
        } else {
            (0.0, w as f64 - 1.0, 0.0, h as f64 - 1.0)
        };
        if u0 > u1 || v0 > v1 {
            continue;
        }
        let n_cam = rot.tr_mul(&s.normal);
        let plane = n_cam.dot(&pc);
        for py in v0 as usize..=v1 as usize {
            for px in u0 as usize..=u1 as usize {
                let ray = Vector3::new((px as f64 - k.cx) / k.fx, (py as f64 - k.cy) / k.fy, 1.0);
                let denom = n_cam.dot(&ray);
                if denom >= 0.0 {
                    continue;
                }
                let t = plane / denom;
                if !(t > MIN_DEPTH) || t >= zbuf[py * w + px] {
                    continue;
                }
                let cam_hit = ray * t;
                if (cam_hit - pc).norm_squared() > s.radius * s.radius {
                    continue;
                }
                let i = py * w + px;
                zbuf[i] = t;
                winner[i] = si;
                hit[i] = eye + rot * cam_hit;
            }
        }
    }
    let mut image = Tensor::zeros(&[3, h, w]);
    let mut depth = vec![0.0; n];
    let mut valid = vec![false; n];
    for i in 0..n {
        if winner[i] == usize::MAX {
            continue;
        }
        let c = scene.surfels[winner[i]].color;
        for ch in 0..3 {
            image.data_mut()[ch * n + i] = c[ch] as f64;
        }
        depth[i] = zbuf[i];
        valid[i] = true;
    }
    FrameSample { image, depth, gt_coords: hit, valid, pose: *pose, intrinsics: *k }
}

/// Metadata stored as `scene.json` at the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    /// Generator parameters; absent for captured data.
    pub room: Option<RoomSpec>,
    pub intrinsics: CameraIntrinsics,
    pub pose_seed: u64,
    pub train_frames: usize,
    pub test_frames: usize,
}

/// A frame with its identifier inside a split.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub sample: FrameSample,
}

pub fn frame_dir(root: &Path, split: Split) -> PathBuf {
    root.join("frames").join(split.name())
}

pub fn frame_id(index: usize) -> String {
    format!("frame-{index:06}")
}

/// Renders `count` frames of a split. Each frame draws its pose from its
/// own stream so frames are independent of each other's order.
pub fn render_split(scene: &SyntheticScene, k: &CameraIntrinsics, pose_seed: u64, split: Split, count: usize) -> Vec<Frame> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(pose_seed);
            rng.set_stream(((split as u64) << 32) | i as u64);
            let pose = sample_pose(scene, &mut rng, split);
            Frame { id: frame_id(i), sample: render_frame(scene, &pose, k) }
        })
        .collect()
}

/// Builds the room and writes a complete dataset directory.
pub fn generate_dataset(root: &Path, meta: &SceneFile) -> Result<(), SceneError> {
    let spec = meta.room.ok_or_else(|| SceneError::Invalid("generation needs room parameters".into()))?;
    meta.intrinsics.validate()?;
    let scene = make_room_from(&spec)?;
    std::fs::create_dir_all(root)?;
    std::fs::write(root.join("scene.json"), serde_json::to_string_pretty(meta)?)?;
    for (split, count) in [(Split::Train, meta.train_frames), (Split::Test, meta.test_frames)] {
        let dir = frame_dir(root, split);
        std::fs::create_dir_all(&dir)?;
        for frame in render_split(&scene, &meta.intrinsics, meta.pose_seed, split, count) {
            write_frame(&dir, &frame)?;
        }
    }
    Ok(())
}

pub fn write_frame(dir: &Path, frame: &Frame) -> Result<(), SceneError> {
    let s = &frame.sample;
    let (w, h) = (s.width(), s.height());
    let n = w * h;
    s.pose.save(dir.join(format!("{}.pose.txt", frame.id)))?;
    let rgb = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| s.image.data()[c * n + i].round().clamp(0.0, 255.0) as u8))
    });
    rgb.save(dir.join(format!("{}.color.png", frame.id)))?;
    let depth = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let mm = (s.depth[i] * 1000.0).round();
        image::Luma([if s.valid[i] && mm >= 1.0 && mm < 65535.0 { mm as u16 } else { 0 }])
    });
    depth.save(dir.join(format!("{}.depth.png", frame.id)))?;
    let mut coords = Vec::with_capacity(n * 24);
    for (p, &v) in s.gt_coords.iter().zip(&s.valid) {
        for c in 0..3 {
            let x = if v { p[c] } else { f64::NAN };
            coords.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(dir.join(format!("{}.coords.bin", frame.id)), coords)?;
    Ok(())
}

pub fn read_scene_file(root: &Path) -> Result<SceneFile, SceneError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(root.join("scene.json"))?)?)
}

/// Frame ids of a split, sorted.
pub fn list_frames(root: &Path, split: Split) -> Result<Vec<String>, SceneError> {
    let mut ids: Vec<String> = std::fs::read_dir(frame_dir(root, split))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".pose.txt")).map(str::to_owned))
        .collect();
    ids.sort();
    Ok(ids)
}

/// Loads one frame. Pixels are valid where the depth PNG holds a
/// measurement; without `coords.bin` coordinates come from backprojection.
pub fn read_frame(root: &Path, split: Split, id: &str, k: &CameraIntrinsics) -> Result<Frame, SceneError> {
    let dir = frame_dir(root, split);
    let pose = RigidPose::load(dir.join(format!("{id}.pose.txt")))?;
    let rgb = image::open(dir.join(format!("{id}.color.png")))?.into_rgb8();
    let depth_png = image::open(dir.join(format!("{id}.depth.png")))?.into_luma16();
    let (w, h) = (k.width, k.height);
    if rgb.dimensions() != (w as u32, h as u32) || depth_png.dimensions() != (w as u32, h as u32) {
        return Err(SceneError::Format(format!("{id}: image size differs from intrinsics {w}x{h}")));
    }
    let n = w * h;
    let mut image = Tensor::zeros(&[3, h, w]);
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            image.data_mut()[c * n + i] = px[c] as f64;
        }
    }
    let raw: Vec<u16> = depth_png.pixels().map(|p| p[0]).collect();
    let mut valid: Vec<bool> = raw.iter().map(|d| !DEPTH_INVALID.contains(d)).collect();
    let depth: Vec<f64> = raw.iter().zip(&valid).map(|(&d, &v)| if v { d as f64 / 1000.0 } else { 0.0 }).collect();
    let coords_path = dir.join(format!("{id}.coords.bin"));
    let gt_coords = if coords_path.exists() {
        let bytes = std::fs::read(&coords_path)?;
        if bytes.len() != n * 24 {
            return Err(SceneError::Format(format!("{id}: coords.bin has {} bytes, expected {}", bytes.len(), n * 24)));
        }
        let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        vals.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
    } else {
        (0..n)
            .map(|i| {
                if !valid[i] {
                    return Ok(Vector3::from_element(f64::NAN));
                }
                let px = Vector2::new((i % w) as f64, (i / w) as f64);
                Ok(backproject(&px, depth[i], &pose, k)?)
            })
            .collect::<Result<Vec<_>, SceneError>>()?
    };
    for (v, p) in valid.iter_mut().zip(&gt_coords) {
        *v &= p.iter().all(|c| c.is_finite());
    }
    let gt_coords = gt_coords
        .into_iter()
        .zip(&valid)
        .map(|(p, &v)| if v { p } else { Vector3::from_element(f64::NAN) })
        .collect();
    Ok(Frame { id: id.to_string(), sample: FrameSample { image, depth, gt_coords, valid, pose, intrinsics: *k } })
}

/// All frames of a split, in id order.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<Frame>, SceneError> {
    let meta = read_scene_file(root)?;
    list_frames(root, split)?.iter().map(|id| read_frame(root, split, id, &meta.intrinsics)).collect()
}

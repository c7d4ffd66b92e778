//! Procedural RGBD video of box rooms.
//!
//! World frame is y-up; the room spans `[0, X] x [0, Y] x [0, Z]`. The
//! ceiling is class 0 (background), the floor class 1, the walls class 2,
//! and every furniture box carries one of the remaining classes. Rendering
//! is exact ray casting, so depth, segmentation and pose are ground truth.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Intrinsics, Se3Motion};
use crate::losses::SegMask;
use crate::tensor::Tensor;

pub const CLASS_BACKGROUND: u32 = 0;
pub const CLASS_FLOOR: u32 = 1;
pub const CLASS_WALL: u32 = 2;
const FIRST_OBJECT_CLASS: u32 = 3;

/// Largest allowed rotation between consecutive frames, radians.
pub const MAX_STEP_ROTATION: f64 = 0.1;
/// Largest allowed translation between consecutive frames, meters.
pub const MAX_STEP_TRANSLATION: f64 = 0.2;

const PLACEMENT_RETRIES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    /// Mean camera speed, meters per frame.
    pub speed: f64,
    /// Velocity smoothing factor in `[0, 1)`; higher is smoother.
    pub smoothing: f64,
    /// Yaw rate bound, radians per frame.
    pub max_yaw_rate: f64,
    /// Camera pitch (negative looks down), radians.
    pub pitch: f64,
    /// Pitch jitter amplitude, radians.
    pub pitch_jitter: f64,
    /// Camera height range, meters.
    pub height: [f64; 2],
    /// Distance kept between the camera path and the walls, meters.
    pub wall_margin: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            speed: 0.05,
            smoothing: 0.85,
            max_yaw_rate: 0.05,
            pitch: -0.3,
            pitch_jitter: 0.1,
            height: [1.2, 1.7],
            wall_margin: 1.4,
        }
    }
}

/// Per-frame illumination changes seen by the camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LightingConfig {
    /// Ambient fraction of the shading.
    pub ambient: f64,
    /// Auto-exposure range; drifts smoothly along the sequence.
    pub exposure: [f64; 2],
    /// Per-frame exposure drift standard deviation.
    pub exposure_drift: f64,
    /// Distance falloff of the camera-mounted lamp, `1 / (1 + k d^2)`.
    pub lamp_falloff: f64,
}

impl Default for LightingConfig {
    fn default() -> Self {
        LightingConfig {
            ambient: 0.35,
            exposure: [0.55, 1.35],
            exposure_drift: 0.04,
            lamp_falloff: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Room extents (x, y, z) in meters.
    pub room: [f64; 3],
    /// Inclusive range of furniture boxes per scene.
    pub object_count: [usize; 2],
    /// Class count including background, floor and wall.
    pub classes: usize,
    /// Image `[height, width]`.
    pub image_size: [usize; 2],
    /// Horizontal focal length as a multiple of image width.
    pub focal: f64,
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub trajectory: TrajectoryConfig,
    pub lighting: LightingConfig,
    /// Relative amplitude of the procedural albedo texture.
    pub texture_noise: f64,
    /// Rarity profile: object class `j` is drawn with probability
    /// proportional to `rarity^j` and is smaller for larger `j`.
    pub rarity: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            room: [6.0, 3.0, 6.0],
            object_count: [8, 12],
            classes: 8,
            image_size: [32, 32],
            focal: 0.8,
            sequences: 24,
            frames_per_sequence: 48,
            trajectory: TrajectoryConfig::default(),
            lighting: LightingConfig::default(),
            texture_noise: 0.25,
            rarity: 0.8,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.room.iter().any(|&e| !(e > 0.0)) {
            return bad(format!("room extents must be positive, got {:?}", self.room));
        }
        if self.image_size.iter().any(|&s| s < 2) {
            return bad(format!("image size {:?} too small", self.image_size));
        }
        if self.object_count[0] > self.object_count[1] {
            return bad("object_count range is reversed".into());
        }
        if self.object_count[1] > 0 && self.classes <= FIRST_OBJECT_CLASS as usize {
            return bad("furniture needs more than 3 classes".into());
        }
        if !(self.focal > 0.0) || !(self.rarity > 0.0 && self.rarity <= 1.0) {
            return bad("focal must be positive and rarity in (0, 1]".into());
        }
        if self.sequences == 0 || self.frames_per_sequence == 0 {
            return bad("need at least one sequence and one frame".into());
        }
        let t = &self.trajectory;
        if !(0.0..1.0).contains(&t.smoothing) || t.speed < 0.0 || t.max_yaw_rate < 0.0 {
            return bad("invalid trajectory parameters".into());
        }
        if t.height[0] > t.height[1] || t.height[0] <= 0.0 || t.height[1] >= self.room[1] {
            return bad("camera height range must lie inside the room".into());
        }
        if 2.0 * t.wall_margin >= self.room[0].min(self.room[2]) {
            return bad("wall margin leaves no room for the camera".into());
        }
        let l = &self.lighting;
        if l.exposure[0] > l.exposure[1] || l.exposure[0] <= 0.0 {
            return bad("invalid exposure range".into());
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let [h, w] = self.image_size;
        let f = self.focal * w as f64;
        Intrinsics {
            fx: f,
            fy: f,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub class: u32,
}

impl SceneObject {
    fn overlaps(&self, other: &SceneObject, gap: f64) -> bool {
        (0..3).all(|i| self.min[i] - gap < other.max[i] && other.min[i] - gap < self.max[i])
    }

    /// Entry distance and hit axis of a ray, if it hits in front.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize, f64)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut axis = 0;
        let mut sign = 0.0;
        for i in 0..3 {
            if dir[i].abs() < 1e-12 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (t0, t1) = {
                let a = (self.min[i] - origin[i]) * inv;
                let b = (self.max[i] - origin[i]) * inv;
                if a < b { (a, b) } else { (b, a) }
            };
            if t0 > t_near {
                t_near = t0;
                axis = i;
                sign = -dir[i].signum();
            }
            t_far = t_far.min(t1);
        }
        (t_near <= t_far && t_near > 1e-9).then_some((t_near, axis, sign))
    }
}

/// Room geometry, furniture and class colors for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub room: [f64; 3],
    pub objects: Vec<SceneObject>,
    pub palette: Vec<[f64; 3]>,
    pub seed: u64,
}

/// Class colors. Several classes deliberately share hues with the room
/// surfaces so that appearance alone is ambiguous.
pub fn class_palette(classes: usize) -> Vec<[f64; 3]> {
    const BASE: [[f64; 3]; 12] = [
        [0.80, 0.80, 0.78], // ceiling
        [0.55, 0.40, 0.28], // floor
        [0.78, 0.72, 0.60], // wall
        [0.50, 0.36, 0.30], // table, close to floor
        [0.36, 0.42, 0.62], // cabinet
        [0.70, 0.66, 0.58], // picture, close to wall
        [0.62, 0.34, 0.30], // chair
        [0.45, 0.55, 0.40], // door
        [0.30, 0.30, 0.34],
        [0.66, 0.56, 0.36],
        [0.40, 0.60, 0.64],
        [0.72, 0.45, 0.55],
    ];
    (0..classes)
        .map(|i| {
            if i < BASE.len() {
                BASE[i]
            } else {
                let h = splitmix(i as u64);
                let f = |s: u32| 0.25 + 0.55 * ((h >> s) & 0xff) as f64 / 255.0;
                [f(0), f(8), f(16)]
            }
        })
        .collect()
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(ix: i64, iy: i64, iz: i64, salt: u64) -> f64 {
    let h = splitmix(
        (ix as u64).wrapping_mul(0x8da6_b343)
            ^ (iy as u64).wrapping_mul(0xd816_3841)
            ^ (iz as u64).wrapping_mul(0xcb1a_b31f)
            ^ salt,
    );
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Trilinear value noise in `[-1, 1]`.
fn value_noise(p: &Vector3<f64>, salt: u64) -> f64 {
    let base = p.map(f64::floor);
    let f = p - base;
    let s = f.map(|t| t * t * (3.0 - 2.0 * t));
    let (x0, y0, z0) = (base.x as i64, base.y as i64, base.z as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { s.x } else { 1.0 - s.x })
                    * (if dy == 1 { s.y } else { 1.0 - s.y })
                    * (if dz == 1 { s.z } else { 1.0 - s.z });
                acc += w * lattice(x0 + dx, y0 + dy, z0 + dz, salt);
            }
        }
    }
    acc
}

fn sample_object_class(rng: &mut ChaCha8Rng, n_object_classes: usize, rarity: f64) -> usize {
    let weights: Vec<f64> = (0..n_object_classes).map(|j| rarity.powi(j as i32)).collect();
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (j, w) in weights.iter().enumerate() {
        if x < *w {
            return j;
        }
        x -= w;
    }
    n_object_classes - 1
}

/// Lay out a room and its furniture.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [rx, ry, rz] = cfg.room;
    let n_obj_classes = cfg.classes.saturating_sub(FIRST_OBJECT_CLASS as usize);
    let count = rng.random_range(cfg.object_count[0]..=cfg.object_count[1]);
    let margin = cfg.trajectory.wall_margin;
    // horizontal footprint the camera may occupy, padded
    let cam_lo = [margin - 0.3, margin - 0.3];
    let cam_hi = [rx - margin + 0.3, rz - margin + 0.3];
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let j = sample_object_class(&mut rng, n_obj_classes, cfg.rarity);
        let class = FIRST_OBJECT_CLASS + j as u32;
        let size = 1.0 - 0.6 * j as f64 / n_obj_classes.max(1) as f64;
        let wall_mounted = j % 2 == 0 && j > 0;
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let cand = if wall_mounted {
                let w = rng.random_range(0.4..1.1) * size;
                let h = rng.random_range(0.4..1.0) * size;
                let y0 = rng.random_range(0.5..(ry - 0.3 - h).max(0.6));
                let thick = 0.05;
                let wall = rng.random_range(0..4);
                let along = |len: f64, rng: &mut ChaCha8Rng| rng.random_range(0.1..(len - 0.1 - w).max(0.2));
                let (min, max) = match wall {
                    0 => {
                        let z = along(rz, &mut rng);
                        ([0.0, y0, z], [thick, y0 + h, z + w])
                    }
                    1 => {
                        let z = along(rz, &mut rng);
                        ([rx - thick, y0, z], [rx, y0 + h, z + w])
                    }
                    2 => {
                        let x = along(rx, &mut rng);
                        ([x, y0, 0.0], [x + w, y0 + h, thick])
                    }
                    _ => {
                        let x = along(rx, &mut rng);
                        ([x, y0, rz - thick], [x + w, y0 + h, rz])
                    }
                };
                SceneObject { min, max, class }
            } else {
                let sx = rng.random_range(0.4..1.3) * size;
                let sz = rng.random_range(0.4..1.3) * size;
                let sy = rng.random_range(0.4..1.4) * size;
                let x = rng.random_range(0.05..(rx - 0.05 - sx));
                let z = rng.random_range(0.05..(rz - 0.05 - sz));
                SceneObject {
                    min: [x, 0.0, z],
                    max: [x + sx, sy, z + sz],
                    class,
                }
            };
            let blocks_camera = cand.min[0] < cam_hi[0]
                && cand.max[0] > cam_lo[0]
                && cand.min[2] < cam_hi[1]
                && cand.max[2] > cam_lo[1];
            let inside = (0..3).all(|i| cand.min[i] >= 0.0 && cand.max[i] <= cfg.room[i]);
            if inside && !blocks_camera && !objects.iter().any(|o| o.overlaps(&cand, 0.02)) {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(o) => objects.push(o),
            None => {
                return Err(Error::Generation(format!(
                    "could not place object {} of {count} after {PLACEMENT_RETRIES} tries",
                    objects.len() + 1
                )))
            }
        }
    }
    Ok(Scene {
        room: cfg.room,
        objects,
        palette: class_palette(cfg.classes),
        seed,
    })
}

/// Per-frame appearance state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameLighting {
    pub exposure: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub rgb: Tensor<f32>,
    pub depth: DepthMap,
    pub seg: SegMask,
    /// Camera-to-world pose.
    pub pose: Se3Motion,
    pub intrinsics: Intrinsics,
    pub index: usize,
    pub lighting: FrameLighting,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub scene: Scene,
    pub seed: u64,
}

/// Camera-to-world pose looking along yaw/pitch from `position`.
pub fn look_pose(position: Vector3<f64>, yaw: f64, pitch: f64) -> Se3Motion {
    let forward = Vector3::new(yaw.sin() * pitch.cos(), pitch.sin(), yaw.cos() * pitch.cos());
    let up = Vector3::new(0.0, 1.0, 0.0);
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let rot = Matrix3::from_columns(&[right, down, forward]);
    Se3Motion::new(rot, position).expect("look-at basis is orthonormal")
}

struct Hit {
    t: f64,
    class: u32,
    normal: Vector3<f64>,
}

fn cast(scene: &Scene, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Result<Hit> {
    let mut best: Option<Hit> = None;
    // room interior: the exit face along the ray
    let mut t_exit = f64::INFINITY;
    let mut exit_axis = 0;
    for i in 0..3 {
        if dir[i].abs() < 1e-12 {
            continue;
        }
        let t = if dir[i] > 0.0 {
            (scene.room[i] - origin[i]) / dir[i]
        } else {
            -origin[i] / dir[i]
        };
        if t < t_exit {
            t_exit = t;
            exit_axis = i;
        }
    }
    if t_exit.is_finite() && t_exit > 0.0 {
        let class = match exit_axis {
            1 if dir[1] < 0.0 => CLASS_FLOOR,
            1 => CLASS_BACKGROUND,
            _ => CLASS_WALL,
        };
        let mut normal = Vector3::zeros();
        normal[exit_axis] = -dir[exit_axis].signum();
        best = Some(Hit {
            t: t_exit,
            class,
            normal,
        });
    }
    for o in &scene.objects {
        if let Some((t, axis, sign)) = o.intersect(origin, dir) {
            if best.as_ref().is_none_or(|b| t < b.t) {
                let mut normal = Vector3::zeros();
                normal[axis] = sign;
                best = Some(Hit {
                    t,
                    class: o.class,
                    normal,
                });
            }
        }
    }
    best.ok_or_else(|| Error::Render("ray escaped the room".into()))
}

/// Ray cast one frame.
pub fn raycast_frame(
    scene: &Scene,
    pose: &Se3Motion,
    intrinsics: &Intrinsics,
    size: [usize; 2],
    lighting: FrameLighting,
    light_cfg: &LightingConfig,
    texture_noise: f64,
    index: usize,
) -> Result<Frame> {
    let [h, w] = size;
    let origin = *pose.translation();
    if (0..3).any(|i| !(origin[i] > 0.0 && origin[i] < scene.room[i])) {
        return Err(Error::Render(format!("camera at {origin:?} is outside the room")));
    }
    let sun = Vector3::new(0.4, 0.8, 0.3).normalize();
    let mut rgb = vec![0f32; h * w * 3];
    let mut depth = vec![0f32; h * w];
    let mut seg = vec![0u32; h * w];
    for row in 0..h {
        for col in 0..w {
            let cam_dir = Vector3::new(
                (col as f64 - intrinsics.cx) / intrinsics.fx,
                (row as f64 - intrinsics.cy) / intrinsics.fy,
                1.0,
            );
            let dir = pose.rotation() * cam_dir;
            let hit = cast(scene, &origin, &dir)?;
            let p = origin + dir * hit.t;
            let px = row * w + col;
            depth[px] = hit.t as f32;
            seg[px] = hit.class;
            let base = scene.palette[hit.class as usize];
            let salt = scene.seed ^ (hit.class as u64).wrapping_mul(0x9e37_79b9);
            let tex = 0.65 * value_noise(&(p * 4.0), salt) + 0.35 * value_noise(&(p * 11.0), salt ^ 0x55);
            let lambert = hit.normal.dot(&sun).abs();
            let range2 = (p - origin).norm_squared();
            let lamp = 1.0 / (1.0 + light_cfg.lamp_falloff * range2);
            let shade = (light_cfg.ambient + (1.0 - light_cfg.ambient) * lambert)
                * (0.5 + 0.5 * lamp)
                * 1.6
                * lighting.exposure;
            for ch in 0..3 {
                let v = base[ch] * (1.0 + texture_noise * tex) * shade;
                rgb[px * 3 + ch] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(Frame {
        rgb: Tensor::new(&[h, w, 3], rgb)?,
        depth: DepthMap::new(h, w, depth)?,
        seg: SegMask::new(h, w, seg)?,
        pose: *pose,
        intrinsics: *intrinsics,
        index,
        lighting,
    })
}

/// Smooth camera path and exposure schedule.
pub fn generate_trajectory(cfg: &SceneConfig, seed: u64) -> Vec<(Se3Motion, FrameLighting)> {
    let t = &cfg.trajectory;
    let l = &cfg.lighting;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_616a);
    let lo = [t.wall_margin, t.height[0], t.wall_margin];
    let hi = [cfg.room[0] - t.wall_margin, t.height[1], cfg.room[2] - t.wall_margin];
    let mut pos = Vector3::from_fn(|i, _| rng.random_range(lo[i]..=hi[i]));
    let mut vel = Vector3::zeros();
    let mut yaw = rng.random_range(0.0..std::f64::consts::TAU);
    let mut yaw_rate = 0.0;
    let mut pitch_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut exposure = rng.random_range(l.exposure[0]..=l.exposure[1]);
    let mut out = Vec::with_capacity(cfg.frames_per_sequence);
    for _ in 0..cfg.frames_per_sequence {
        let pitch = t.pitch + t.pitch_jitter * pitch_phase.sin();
        out.push((look_pose(pos, yaw, pitch), FrameLighting { exposure }));

        let noise = Vector3::new(
            rng.random_range(-1.0..1.0),
            0.3 * rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        vel = vel * t.smoothing + noise * (t.speed * (1.0 - t.smoothing) * 3.0);
        let speed = vel.norm();
        let cap = (2.0 * t.speed).min(0.9 * MAX_STEP_TRANSLATION);
        if speed > cap {
            vel *= cap / speed;
        }
        for i in 0..3 {
            let next = pos[i] + vel[i];
            if next < lo[i] || next > hi[i] {
                vel[i] = -vel[i];
            }
            pos[i] = (pos[i] + vel[i]).clamp(lo[i], hi[i]);
        }
        yaw_rate = (yaw_rate * t.smoothing + rng.random_range(-1.0..1.0) * t.max_yaw_rate * 0.5)
            .clamp(-t.max_yaw_rate, t.max_yaw_rate);
        yaw += yaw_rate;
        pitch_phase += rng.random_range(0.05..0.15);
        exposure = (exposure + rng.random_range(-1.0..1.0) * l.exposure_drift).clamp(l.exposure[0], l.exposure[1]);
    }
    out
}

/// Render one sequence; frames render in parallel.
pub fn generate_sequence(cfg: &SceneConfig, seed: u64) -> Result<Sequence> {
    let scene = generate_scene(cfg, seed)?;
    let k = cfg.intrinsics();
    let traj = generate_trajectory(cfg, seed);
    let frames = traj
        .par_iter()
        .enumerate()
        .map(|(i, (pose, light))| {
            raycast_frame(&scene, pose, &k, cfg.image_size, *light, &cfg.lighting, cfg.texture_noise, i)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sequence { frames, scene, seed })
}

/// Sequence seeds derived from a dataset seed.
pub fn sequence_seed(dataset_seed: u64, index: usize) -> u64 {
    splitmix(dataset_seed ^ splitmix(index as u64 + 1))
}

/// Render `cfg.sequences` sequences.
pub fn generate_dataset(cfg: &SceneConfig, seed: u64) -> Result<Vec<Sequence>> {
    cfg.validate()?;
    (0..cfg.sequences)
        .map(|i| generate_sequence(cfg, sequence_seed(seed, i)))
        .collect()
}

/// Pixel share of every class across all frames.
pub fn class_census<'a>(frames: impl IntoIterator<Item = &'a Frame>, classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; classes];
    let mut total = 0u64;
    for f in frames {
        for &id in f.seg.ids() {
            counts[id as usize] += 1;
            total += 1;
        }
    }
    counts
        .iter()
        .map(|&c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
        .collect()
}

//! Synthetic camera trajectories through procedurally textured geometry.
//!
//! Every patch casts one ray through its center pixel; the hit point gives
//! the patch's world point, depth and appearance feature.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cache::ModelDims;
use crate::geometry::{Intrinsics, PointMap, Pose};

/// Frames per full revolution of the orbit trajectory.
pub const ORBIT_PERIOD: u64 = 120;
const ROOM_RADIUS: f64 = 6.0;
const CORRIDOR_HALF_WIDTH: f64 = 2.0;
const CORRIDOR_HALF_HEIGHT: f64 = 1.2;
const CORRIDOR_SPEED: f64 = 0.15;
const NUM_BLOBS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    /// Camera circles the center of a cylindrical room, looking outward.
    Orbit,
    /// Camera walks down a long box corridor.
    Corridor,
    /// Camera wanders and turns randomly inside a cylindrical room.
    #[serde(rename = "randomwalk")]
    RandomWalk,
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SceneKind::Orbit => "orbit",
            SceneKind::Corridor => "corridor",
            SceneKind::RandomWalk => "randomwalk",
        })
    }
}

impl FromStr for SceneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "orbit" => Ok(SceneKind::Orbit),
            "corridor" => Ok(SceneKind::Corridor),
            "randomwalk" | "random-walk" => Ok(SceneKind::RandomWalk),
            other => Err(format!("unknown scene `{other}` (orbit, corridor, randomwalk)")),
        }
    }
}

/// Procedural appearance: a bank of sinusoids whose amplitude is modulated
/// by a few soft blobs, so some surface regions are strongly textured and
/// the rest nearly flat.
#[derive(Debug, Clone)]
struct Texture {
    freqs: Vec<[f64; 3]>,
    phases: Vec<f64>,
    blob_freqs: Vec<[f64; 3]>,
    blob_phases: Vec<f64>,
}

impl Texture {
    fn new(width: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = Normal::new(0.0, 1.2).expect("finite");
        let freqs = (0..width)
            .map(|_| [n.sample(rng), n.sample(rng), n.sample(rng)])
            .collect();
        let phases = (0..width).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let slow = Normal::new(0.0, 0.6).expect("finite");
        let blob_freqs = (0..NUM_BLOBS)
            .map(|_| [slow.sample(rng), slow.sample(rng), slow.sample(rng)])
            .collect();
        let blob_phases = (0..NUM_BLOBS).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        Self {
            freqs,
            phases,
            blob_freqs,
            blob_phases,
        }
    }

    fn saliency(&self, p: &Vector3<f64>) -> f64 {
        let s: f64 = self
            .blob_freqs
            .iter()
            .zip(&self.blob_phases)
            .map(|(w, ph)| (w[0] * p.x + w[1] * p.y + w[2] * p.z + ph).sin())
            .sum::<f64>()
            / NUM_BLOBS as f64;
        0.05 + 2.0 * s.max(0.0).powi(2)
    }

    fn sample(&self, p: &Vector3<f64>, out: &mut Vec<f32>) {
        let amp = self.saliency(p);
        out.extend(
            self.freqs
                .iter()
                .zip(&self.phases)
                .map(|(w, ph)| (amp * (w[0] * p.x + w[1] * p.y + w[2] * p.z + ph).sin()) as f32),
        );
    }
}

/// One frame of the scene: pose, per-patch world points with confidence,
/// and per-patch appearance features (`N_p x width`).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub pose: Pose,
    pub points: PointMap,
    pub features: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryScene {
    kind: SceneKind,
    seed: u64,
    dims: ModelDims,
    cam: Intrinsics,
    poses: Vec<Pose>,
    texture: Texture,
}

fn yaw_pose(yaw: f64, position: [f64; 3]) -> Pose {
    Pose::from_axis_angle([0.0, 1.0, 0.0], yaw, position)
}

/// Distance along `dir` from `origin` to the inside of a vertical cylinder.
fn hit_cylinder(origin: &Vector3<f64>, dir: &Vector3<f64>, radius: f64) -> Option<f64> {
    let a = dir.x * dir.x + dir.z * dir.z;
    if a < 1e-12 {
        return None;
    }
    let b = 2.0 * (origin.x * dir.x + origin.z * dir.z);
    let c = origin.x * origin.x + origin.z * origin.z - radius * radius;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let t = (-b + disc.sqrt()) / (2.0 * a);
    (t > 0.0).then_some(t)
}

fn hit_corridor(origin: &Vector3<f64>, dir: &Vector3<f64>, end_z: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |o: f64, d: f64, plane: f64| {
        if d.abs() > 1e-12 {
            let t = (plane - o) / d;
            if t > 1e-9 && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
    };
    consider(origin.x, dir.x, CORRIDOR_HALF_WIDTH);
    consider(origin.x, dir.x, -CORRIDOR_HALF_WIDTH);
    consider(origin.y, dir.y, CORRIDOR_HALF_HEIGHT);
    consider(origin.y, dir.y, -CORRIDOR_HALF_HEIGHT);
    consider(origin.z, dir.z, end_z);
    best
}

impl TrajectoryScene {
    pub fn new(kind: SceneKind, seed: u64, num_frames: u64, dims: ModelDims, cam: Intrinsics) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce4e);
        let texture = Texture::new(dims.token_width(), &mut rng);
        let poses = match kind {
            SceneKind::Orbit => (0..num_frames)
                .map(|t| {
                    let yaw = 2.0 * PI * t as f64 / ORBIT_PERIOD as f64;
                    yaw_pose(yaw, [0.5 * yaw.sin(), 0.0, 0.5 * yaw.cos()])
                })
                .collect(),
            SceneKind::Corridor => (0..num_frames)
                .map(|t| {
                    let t = t as f64;
                    yaw_pose(0.15 * (0.03 * t).sin(), [0.4 * (0.05 * t).sin(), 0.0, CORRIDOR_SPEED * t])
                })
                .collect(),
            SceneKind::RandomWalk => {
                let turn = Normal::new(0.0, 0.05).expect("finite");
                let (mut x, mut z, mut yaw) = (0.0f64, 0.0f64, 0.0f64);
                (0..num_frames)
                    .map(|_| {
                        let pose = yaw_pose(yaw, [x, 0.0, z]);
                        yaw += 0.02 + turn.sample(&mut rng);
                        let heading = rng.random_range(0.0..2.0 * PI);
                        x += 0.08 * heading.cos();
                        z += 0.08 * heading.sin();
                        let r = (x * x + z * z).sqrt();
                        if r > 3.0 {
                            x *= 3.0 / r;
                            z *= 3.0 / r;
                        }
                        pose
                    })
                    .collect()
            }
        };
        Self {
            kind,
            seed,
            dims,
            cam,
            poses,
            texture,
        }
    }

    pub fn kind(&self) -> SceneKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_frames(&self) -> u64 {
        self.poses.len() as u64
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.cam
    }

    pub fn pose(&self, t: u64) -> &Pose {
        &self.poses[t as usize]
    }

    pub fn frame(&self, t: u64) -> SceneFrame {
        let pose = self.poses[t as usize];
        let origin = *pose.translation();
        let np = self.dims.num_patches();
        let mut points = Vec::with_capacity(np);
        let mut confidence = Vec::with_capacity(np);
        let mut features = Vec::with_capacity(np * self.dims.token_width());
        let end_z = CORRIDOR_SPEED * self.num_frames() as f64 + 30.0;
        for p in 0..np {
            let (row, col) = (p / self.dims.patch_cols, p % self.dims.patch_cols);
            let u = (col as f64 + 0.5) * f64::from(self.cam.width) / self.dims.patch_cols as f64;
            let v = (row as f64 + 0.5) * f64::from(self.cam.height) / self.dims.patch_rows as f64;
            let dir_cam = self.cam.back_project(u, v, 1.0);
            let dir = pose.rotation() * dir_cam;
            let dist = match self.kind {
                SceneKind::Orbit | SceneKind::RandomWalk => hit_cylinder(&origin, &dir, ROOM_RADIUS),
                SceneKind::Corridor => hit_corridor(&origin, &dir, end_z),
            }
            .unwrap_or(50.0);
            // dir_cam has unit z, so `dist` is the depth
            let world = origin + dir * dist;
            points.push([world.x, world.y, world.z]);
            confidence.push((1.0 / (1.0 + dist)).clamp(f64::MIN_POSITIVE, 1.0));
            self.texture.sample(&world, &mut features);
        }
        SceneFrame {
            pose,
            points: PointMap { points, confidence },
            features,
        }
    }
}

//! Rigid poses, pinhole projection and the anchor coverage ratio.
//!
//! Poses are camera-to-world: a camera-frame point `p` sits at `R p + t` in
//! the world. Cameras look down +z with +x right and +y down.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points at or nearer than this depth are never counted as covered.
pub const DEFAULT_Z_MIN: f64 = 1e-6;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 12]", try_from = "[f64; 12]")]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(err <= ORTHO_TOL && (det - 1.0).abs() <= ORTHO_TOL) || !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::MalformedFrame(format!(
                "pose rotation is not in SO(3) (orthogonality error {err:e}, det {det})"
            )));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::from(t),
        }
    }

    /// Rotation of `angle` radians about `axis`, followed by translation `t`.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, t: [f64; 3]) -> Self {
        let axis = Unit::new_normalize(Vector3::from(axis));
        Self {
            rotation: Rotation3::from_axis_angle(&axis, angle).into_inner(),
            translation: Vector3::from(t),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self * other`
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation rows followed by the translation column, `[R | t]` row-major.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn from_row_major(m: [f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::new(rotation, Vector3::new(m[3], m[7], m[11]))
    }
}

impl From<Pose> for [f64; 12] {
    fn from(p: Pose) -> Self {
        p.to_row_major()
    }
}

impl TryFrom<[f64; 12]> for Pose {
    type Error = Error;

    fn try_from(m: [f64; 12]) -> Result<Self> {
        Pose::from_row_major(m)
    }
}

/// `T_current^-1 * T_anchor`: maps anchor-camera coordinates to
/// current-camera coordinates.
pub fn compose_relative(current: &Pose, anchor: &Pose) -> Pose {
    current.inverse().compose(anchor)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// A camera whose image tiles exactly into `rows x cols` patches of
    /// `patch` pixels, with the focal length equal to the image width.
    pub fn for_patch_grid(rows: usize, cols: usize, patch: u32) -> Self {
        let width = cols as u32 * patch;
        let height = rows as u32 * patch;
        Self {
            fx: f64::from(width),
            fy: f64::from(width),
            cx: f64::from(width) / 2.0,
            cy: f64::from(height) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidConfig {
                field: "camera",
                reason: "focal lengths must be positive".into(),
            });
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig {
                field: "camera",
                reason: "image size must be positive".into(),
            });
        }
        Ok(())
    }

    /// Pixel coordinates of a camera-frame point, or `None` at or behind
    /// `z_min`.
    pub fn project(&self, p: &Vector3<f64>, z_min: f64) -> Option<(f64, f64)> {
        if p.z.is_nan() || p.z <= z_min {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        (0.0..f64::from(self.width)).contains(&u) && (0.0..f64::from(self.height)).contains(&v)
    }

    /// Camera-frame point at `depth` along the ray through pixel `(u, v)`.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth)
    }
}

/// World-frame 3-D points and confidences at patch resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMap {
    pub points: Vec<[f64; 3]>,
    pub confidence: Vec<f64>,
}

impl PointMap {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self, num_patches: usize) -> Result<()> {
        if self.points.len() != num_patches || self.confidence.len() != num_patches {
            return Err(Error::MalformedFrame(format!(
                "point map holds {} points and {} confidences, expected {num_patches}",
                self.points.len(),
                self.confidence.len()
            )));
        }
        if let Some(i) = self.confidence.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite { slot: i });
        }
        if let Some(i) = self.points.iter().position(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite { slot: i });
        }
        Ok(())
    }
}

/// Fraction of the anchor's points that land inside the current image.
pub fn coverage_ratio(anchor_points: &PointMap, anchor_pose: &Pose, current_pose: &Pose, cam: &Intrinsics) -> f64 {
    coverage_ratio_with(anchor_points, anchor_pose, current_pose, cam, DEFAULT_Z_MIN)
}

pub fn coverage_ratio_with(
    anchor_points: &PointMap,
    anchor_pose: &Pose,
    current_pose: &Pose,
    cam: &Intrinsics,
    z_min: f64,
) -> f64 {
    if anchor_points.is_empty() {
        return 0.0;
    }
    let to_anchor_cam = anchor_pose.inverse();
    let relative = compose_relative(current_pose, anchor_pose);
    let covered = anchor_points
        .points
        .iter()
        .filter(|p| {
            let p_anchor = to_anchor_cam.transform_point(&Vector3::from(**p));
            let p_cur = relative.transform_point(&p_anchor);
            cam.project(&p_cur, z_min)
                .is_some_and(|(u, v)| cam.contains(u, v))
        })
        .count();
    covered as f64 / anchor_points.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type M4 = [[f64; 4]; 4];

    fn homogeneous(p: &Pose) -> M4 {
        let m = p.to_row_major();
        [
            [m[0], m[1], m[2], m[3]],
            [m[4], m[5], m[6], m[7]],
            [m[8], m[9], m[10], m[11]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    fn mul(a: &M4, b: &M4) -> M4 {
        let mut c = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    c[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        c
    }

    /// Rigid inverse written out by hand: `[R^T | -R^T t]`.
    fn rigid_inverse(a: &M4) -> M4 {
        let mut inv = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = a[j][i];
            }
        }
        for i in 0..3 {
            inv[i][3] = -(0..3).map(|k| a[k][i] * a[k][3]).sum::<f64>();
        }
        inv[3][3] = 1.0;
        inv
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)];
        let t = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        Pose::from_axis_angle(axis, rng.random_range(-3.0..3.0), t)
    }

    fn cam() -> Intrinsics {
        Intrinsics::for_patch_grid(4, 4, 16)
    }

    #[test]
    fn relative_of_equal_poses_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng);
        let r = compose_relative(&p, &p);
        assert!((r.rotation() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(r.translation().norm() < 1e-12);
    }

    #[test]
    fn relative_from_identity_is_anchor_translation() {
        let r = compose_relative(&Pose::identity(), &Pose::from_translation([1.0, -2.0, 3.5]));
        assert_eq!(r.translation(), &Vector3::new(1.0, -2.0, 3.5));
    }

    #[test]
    fn relative_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let (cur, anc) = (random_pose(&mut rng), random_pose(&mut rng));
            let got = homogeneous(&compose_relative(&cur, &anc));
            let want = mul(&rigid_inverse(&homogeneous(&cur)), &homogeneous(&anc));
            for i in 0..4 {
                for j in 0..4 {
                    assert!((got[i][j] - want[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn pose_validation() {
        assert!(Pose::new(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
        let reflect = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Pose::new(reflect, Vector3::zeros()).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_pose(&mut rng);
        assert_eq!(Pose::from_row_major(p.to_row_major()).unwrap(), p);
    }

    fn grid_points(pose: &Pose, cam: &Intrinsics, depth: f64, n: usize) -> PointMap {
        let mut points = Vec::new();
        for r in 0..n {
            for c in 0..n {
                let u = (c as f64 + 0.5) * f64::from(cam.width) / n as f64;
                let v = (r as f64 + 0.5) * f64::from(cam.height) / n as f64;
                let p = pose.transform_point(&cam.back_project(u, v, depth));
                points.push([p.x, p.y, p.z]);
            }
        }
        PointMap {
            confidence: vec![1.0; points.len()],
            points,
        }
    }

    #[test]
    fn same_view_full_coverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose = random_pose(&mut rng);
        let pts = grid_points(&pose, &cam(), 3.0, 4);
        assert_eq!(coverage_ratio(&pts, &pose, &pose, &cam()), 1.0);
    }

    #[test]
    fn turned_around_zero_coverage() {
        let anchor = Pose::identity();
        let pts = PointMap {
            points: (1..10).map(|z| [0.0, 0.0, z as f64]).collect(),
            confidence: vec![1.0; 9],
        };
        let current = Pose::from_axis_angle([0.0, 1.0, 0.0], std::f64::consts::PI, [0.0; 3]);
        assert_eq!(coverage_ratio(&pts, &anchor, &current, &cam()), 0.0);
    }

    #[test]
    fn points_on_camera_plane_never_covered() {
        let pts = PointMap {
            points: vec![[0.0, 0.0, 0.0], [0.0, 0.0, 1e-7]],
            confidence: vec![1.0; 2],
        };
        let id = Pose::identity();
        assert_eq!(coverage_ratio(&pts, &id, &id, &cam()), 0.0);
    }

    /// Projection oracle written against raw arrays.
    fn oracle_coverage(pts: &PointMap, current: &Pose, cam: &Intrinsics) -> f64 {
        let m = homogeneous(current);
        let inv = rigid_inverse(&m);
        let mut covered = 0;
        for p in &pts.points {
            let q: Vec<f64> = (0..3)
                .map(|i| inv[i][0] * p[0] + inv[i][1] * p[1] + inv[i][2] * p[2] + inv[i][3])
                .collect();
            if q[2] <= DEFAULT_Z_MIN {
                continue;
            }
            let u = cam.fx * q[0] / q[2] + cam.cx;
            let v = cam.fy * q[1] / q[2] + cam.cy;
            if u >= 0.0 && u < cam.width as f64 && v >= 0.0 && v < cam.height as f64 {
                covered += 1;
            }
        }
        covered as f64 / pts.points.len() as f64
    }

    #[test]
    fn sideways_shift_matches_oracle() {
        let c = cam();
        let anchor = Pose::identity();
        let pts = grid_points(&anchor, &c, 5.0, 4);
        // half the frustum width at depth 5
        let half = 0.5 * f64::from(c.width) / c.fx * 5.0 / 2.0;
        let current = Pose::from_translation([half, 0.0, 0.0]);
        let rho = coverage_ratio(&pts, &anchor, &current, &c);
        assert_eq!(rho, oracle_coverage(&pts, &current, &c));
        assert!(rho > 0.0 && rho < 1.0);
    }

    #[test]
    fn invariant_under_world_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = cam();
        for _ in 0..50 {
            let anchor = random_pose(&mut rng);
            let pts = grid_points(&anchor, &c, rng.random_range(1.0..8.0), 5);
            let current = anchor.compose(&Pose::from_axis_angle(
                [0.0, 1.0, 0.0],
                rng.random_range(-0.6..0.6),
                [rng.random_range(-1.0..1.0), 0.0, 0.0],
            ));
            let world = random_pose(&mut rng);
            let moved = PointMap {
                points: pts
                    .points
                    .iter()
                    .map(|p| {
                        let q = world.transform_point(&Vector3::from(*p));
                        [q.x, q.y, q.z]
                    })
                    .collect(),
                confidence: pts.confidence.clone(),
            };
            let a = coverage_ratio(&pts, &anchor, &current, &c);
            let b = coverage_ratio(&moved, &world.compose(&anchor), &world.compose(&current), &c);
            assert!((a - b).abs() <= 1.0 / 25.0 + 1e-12, "{a} vs {b}");
            assert!((0.0..=1.0).contains(&a));
        }
    }
}

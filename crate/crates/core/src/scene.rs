//! Cameras, pose sampling, ray generation and projection into the
//! reference image plane.
//!
//! Axis convention: z is up, azimuth rotates about z starting from +x, and
//! elevation is measured from the xy-plane. Every camera looks at the world
//! origin. Normalized image coordinates `(u, v)` span `[-1, 1]²` with `u`
//! increasing to the right and `v` increasing upwards; pixel `(row, col)`
//! has its center at `u = 2(col + ½)/W − 1`, `v = 1 − 2(row + ½)/H`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::{Real, Vec3};

/// Distance of the reference camera from the origin.
pub const REFERENCE_RADIUS: f64 = 3.2;

/// Radius of the origin-centred sphere that bounds ray sampling.
pub const SCENE_BOUND_RADIUS: f64 = 1.5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SceneError {
    #[error("camera radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("invalid {name} bounds: min {min} > max {max}")]
    InvalidBounds { name: &'static str, min: f64, max: f64 },
    #[error("field of view must lie in (0, pi), got {0}")]
    InvalidFov(f64),
    #[error("image size must be at least 1x1, got {0}x{1}")]
    EmptyImage(usize, usize),
    #[error("pose file line {line}: {reason}")]
    PoseFile { line: usize, reason: String },
    #[error("pose file contains no poses")]
    EmptyPoseFile,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Radians about +z.
    pub azimuth: f64,
    /// Radians above the xy-plane.
    pub elevation: f64,
    pub radius: f64,
}

impl CameraPose {
    pub fn new(azimuth: f64, elevation: f64, radius: f64) -> Result<Self, SceneError> {
        if !(radius > 0.0) {
            return Err(SceneError::NonPositiveRadius(radius));
        }
        Ok(Self { azimuth, elevation, radius })
    }

    pub fn from_degrees(azimuth: f64, elevation: f64, radius: f64) -> Result<Self, SceneError> {
        Self::new(azimuth.to_radians(), elevation.to_radians(), radius)
    }

    /// The pose bound to the input image: azimuth 0, elevation 0, radius 3.2.
    pub fn reference() -> Self {
        Self { azimuth: 0.0, elevation: 0.0, radius: REFERENCE_RADIUS }
    }

    pub fn origin(&self) -> Vec3<f64> {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        Vec3::new(ce * ca, ce * sa, se) * self.radius
    }

    /// Orthonormal camera frame `(right, up, forward)`; `forward` points at
    /// the origin.
    pub fn frame(&self) -> CameraFrame {
        let origin = self.origin();
        let forward = (-origin).normalized();
        let world_up = Vec3::new(0.0, 0.0, 1.0);
        let mut right = forward.cross(world_up);
        if right.norm() < 1e-9 {
            // Looking straight up or down.
            right = forward.cross(Vec3::new(0.0, 1.0, 0.0));
        }
        let right = right.normalized();
        let up = right.cross(forward);
        CameraFrame { origin, right, up, forward }
    }

    /// World-to-camera rotation, rows `(right, up, -forward)`.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let f = self.frame();
        [f.right.to_array(), f.up.to_array(), (-f.forward).to_array()]
    }

    pub fn azimuth_degrees(&self) -> f64 {
        self.azimuth.to_degrees()
    }

    pub fn elevation_degrees(&self) -> f64 {
        self.elevation.to_degrees()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CameraFrame {
    pub origin: Vec3<f64>,
    pub right: Vec3<f64>,
    pub up: Vec3<f64>,
    pub forward: Vec3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Radians.
    pub vertical_fov: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub const DEFAULT_FOV_DEGREES: f64 = 40.0;

    pub fn new(vertical_fov: f64, width: usize, height: usize) -> Result<Self, SceneError> {
        let intr = Self { vertical_fov, width, height };
        intr.validate()?;
        Ok(intr)
    }

    /// Square image with the default 40° field of view.
    pub fn square(size: usize) -> Self {
        Self { vertical_fov: Self::DEFAULT_FOV_DEGREES.to_radians(), width: size, height: size }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.vertical_fov > 0.0 && self.vertical_fov < PI) {
            return Err(SceneError::InvalidFov(self.vertical_fov));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::EmptyImage(self.width, self.height));
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    fn tan_half(&self) -> (f64, f64) {
        let ty = (0.5 * self.vertical_fov).tan();
        (ty * self.width as f64 / self.height as f64, ty)
    }

    /// Normalized coordinates of a pixel center.
    pub fn pixel_to_ndc(&self, row: usize, col: usize) -> (f64, f64) {
        let u = 2.0 * (col as f64 + 0.5) / self.width as f64 - 1.0;
        let v = 1.0 - 2.0 * (row as f64 + 0.5) / self.height as f64;
        (u, v)
    }

    /// Continuous `(row, col)` pixel coordinates of a normalized point;
    /// integer values are pixel centers.
    pub fn ndc_to_pixel(&self, u: f64, v: f64) -> (f64, f64) {
        let col = (u + 1.0) * 0.5 * self.width as f64 - 0.5;
        let row = (1.0 - v) * 0.5 * self.height as f64 - 0.5;
        (row, col)
    }
}

/// Uniform sampling box for training viewpoints. Angles in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseBounds {
    pub elevation: (f64, f64),
    pub azimuth: (f64, f64),
    pub radius: (f64, f64),
}

impl Default for PoseBounds {
    fn default() -> Self {
        Self { elevation: ((-15f64).to_radians(), 45f64.to_radians()), azimuth: (0.0, 2.0 * PI), radius: (3.0, 3.5) }
    }
}

impl PoseBounds {
    pub fn validate(&self) -> Result<(), SceneError> {
        for (name, (lo, hi)) in [("elevation", self.elevation), ("azimuth", self.azimuth), ("radius", self.radius)] {
            if !(lo <= hi) {
                return Err(SceneError::InvalidBounds { name, min: lo, max: hi });
            }
        }
        if !(self.radius.0 > 0.0) {
            return Err(SceneError::NonPositiveRadius(self.radius.0));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

pub fn sample_random_pose<R: Rng + ?Sized>(rng: &mut R, bounds: &PoseBounds) -> Result<CameraPose, SceneError> {
    bounds.validate()?;
    let elevation = uniform(rng, bounds.elevation);
    let azimuth = uniform(rng, bounds.azimuth);
    let radius = uniform(rng, bounds.radius);
    CameraPose::new(azimuth, elevation, radius)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<S> {
    pub origin: Vec3<S>,
    /// Unit length.
    pub dir: Vec3<S>,
}

impl<S: Real> Ray<S> {
    #[inline]
    pub fn at(&self, t: S) -> Vec3<S> {
        self.origin + self.dir * t
    }

    pub fn cast<T: Real>(&self) -> Ray<T> {
        Ray { origin: Vec3::from_f64(self.origin.to_f64()), dir: Vec3::from_f64(self.dir.to_f64()) }
    }
}

/// One ray per pixel, row-major.
#[derive(Clone, Debug)]
pub struct RayBundle {
    pub rays: Vec<Ray<f64>>,
    pub pixel_coords: Vec<(usize, usize)>,
    pub width: usize,
    pub height: usize,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Direction of the ray through normalized image point `(u, v)`.
pub fn ray_direction(pose: &CameraPose, intr: &CameraIntrinsics, u: f64, v: f64) -> Vec3<f64> {
    let f = pose.frame();
    let (tx, ty) = intr.tan_half();
    (f.forward + f.right * (u * tx) + f.up * (v * ty)).normalized()
}

pub fn generate_rays(pose: &CameraPose, intr: &CameraIntrinsics) -> RayBundle {
    let frame = pose.frame();
    let (tx, ty) = intr.tan_half();
    let mut rays = Vec::with_capacity(intr.n_pixels());
    let mut pixel_coords = Vec::with_capacity(intr.n_pixels());
    for row in 0..intr.height {
        for col in 0..intr.width {
            let (u, v) = intr.pixel_to_ndc(row, col);
            let dir = (frame.forward + frame.right * (u * tx) + frame.up * (v * ty)).normalized();
            rays.push(Ray { origin: frame.origin, dir });
            pixel_coords.push((row, col));
        }
    }
    RayBundle { rays, pixel_coords, width: intr.width, height: intr.height }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Distance along the optical axis; positive in front of the camera.
    pub depth: f64,
    pub in_frustum: bool,
}

/// Projects a world point into normalized image coordinates of `pose`.
pub fn project(pose: &CameraPose, intr: &CameraIntrinsics, x: Vec3<f64>) -> Projection {
    project_with_frame(&pose.frame(), intr, x)
}

/// [`project`] with a precomputed camera frame, for hot loops.
#[inline]
pub fn project_with_frame(frame: &CameraFrame, intr: &CameraIntrinsics, x: Vec3<f64>) -> Projection {
    let p = x - frame.origin;
    let depth = p.dot(frame.forward);
    if depth <= 0.0 {
        return Projection { u: 0.0, v: 0.0, depth, in_frustum: false };
    }
    let (tx, ty) = intr.tan_half();
    let u = p.dot(frame.right) / (depth * tx);
    let v = p.dot(frame.up) / (depth * ty);
    let in_frustum = u.abs() <= 1.0 && v.abs() <= 1.0;
    Projection { u, v, depth, in_frustum }
}

/// World point at ray distance `t` along the ray through `(u, v)`.
pub fn unproject(pose: &CameraPose, intr: &CameraIntrinsics, u: f64, v: f64, t: f64) -> Vec3<f64> {
    pose.origin() + ray_direction(pose, intr, u, v) * t
}

/// Entry/exit distances of a ray against the origin-centred bounding sphere,
/// falling back to `[|o| − R, |o| + R]` for rays that miss it.
pub fn sphere_bounds(ray: &Ray<f64>, bound_radius: f64) -> (f64, f64) {
    let b = ray.origin.dot(ray.dir);
    let c = ray.origin.dot(ray.origin) - bound_radius * bound_radius;
    let disc = b * b - c;
    let dist = ray.origin.norm();
    if disc > 0.0 {
        let s = disc.sqrt();
        let near = (-b - s).max(0.0);
        let far = -b + s;
        if far > near {
            return (near, far);
        }
    }
    ((dist - bound_radius).max(1e-3), dist + bound_radius)
}

/// The evaluation rig: four elevation rings of seventeen evenly spaced
/// azimuths at the reference radius.
pub fn canonical_rig() -> Vec<CameraPose> {
    const ELEVATIONS: [f64; 4] = [0.0, 10.0, -10.0, 30.0];
    const N_AZIMUTH: usize = 17;
    let mut poses = Vec::with_capacity(ELEVATIONS.len() * N_AZIMUTH);
    for &el in &ELEVATIONS {
        for k in 0..N_AZIMUTH {
            let az = 360.0 * k as f64 / N_AZIMUTH as f64;
            poses.push(CameraPose { azimuth: az.to_radians(), elevation: el.to_radians(), radius: REFERENCE_RADIUS });
        }
    }
    poses
}

/// Parses a pose file: one `azimuth elevation radius` triple per line, angles
/// in degrees. Blank lines and `#` comments are ignored.
pub fn parse_poses(text: &str) -> Result<Vec<CameraPose>, SceneError> {
    let mut poses = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(SceneError::PoseFile {
                line: idx + 1,
                reason: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 3];
        for (slot, f) in vals.iter_mut().zip(&fields) {
            *slot = f
                .parse()
                .map_err(|_| SceneError::PoseFile { line: idx + 1, reason: format!("not a number: {f:?}") })?;
        }
        let pose = CameraPose::from_degrees(vals[0], vals[1], vals[2])
            .map_err(|e| SceneError::PoseFile { line: idx + 1, reason: e.to_string() })?;
        poses.push(pose);
    }
    if poses.is_empty() {
        return Err(SceneError::EmptyPoseFile);
    }
    Ok(poses)
}

pub fn format_poses(poses: &[CameraPose]) -> String {
    let mut out = String::from("# azimuth_deg elevation_deg radius\n");
    for p in poses {
        let _ = writeln!(out, "{} {} {}", p.azimuth_degrees(), p.elevation_degrees(), p.radius);
    }
    out
}

pub fn read_pose_file(path: &Path) -> std::io::Result<Result<Vec<CameraPose>, SceneError>> {
    Ok(parse_poses(&std::fs::read_to_string(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_pose_sits_on_positive_x() {
        let o = CameraPose::reference().origin();
        assert!((o.x - 3.2).abs() < 1e-12 && o.y.abs() < 1e-12 && o.z.abs() < 1e-12);
    }

    #[test]
    fn rotation_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let pose = sample_random_pose(&mut rng, &PoseBounds::default()).unwrap();
            let r = pose.rotation();
            for i in 0..3 {
                for j in 0..3 {
                    let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((d - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn degenerate_bounds_give_reference_pose() {
        let bounds = PoseBounds { elevation: (0.0, 0.0), azimuth: (0.0, 0.0), radius: (3.2, 3.2) };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_random_pose(&mut rng, &bounds).unwrap(), CameraPose::reference());
    }

    #[test]
    fn inverted_bounds_rejected() {
        let bounds = PoseBounds { radius: (3.5, 3.0), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_random_pose(&mut rng, &bounds), Err(SceneError::InvalidBounds { name: "radius", .. })));
    }

    #[test]
    fn default_bounds_respected_over_many_draws() {
        let bounds = PoseBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let p = sample_random_pose(&mut rng, &bounds).unwrap();
            let el = p.elevation_degrees();
            assert!((-15.0..=45.0).contains(&el));
            assert!((0.0..=360.0).contains(&p.azimuth_degrees()));
            assert!((3.0..=3.5).contains(&p.radius));
        }
    }

    #[test]
    fn different_seeds_give_different_poses() {
        let bounds = PoseBounds::default();
        for s in 0..100u64 {
            let a = sample_random_pose(&mut ChaCha8Rng::seed_from_u64(2 * s), &bounds).unwrap();
            let b = sample_random_pose(&mut ChaCha8Rng::seed_from_u64(2 * s + 1), &bounds).unwrap();
            assert_ne!(a, b);
        }
    }

    #[test]
    fn center_ray_points_at_origin() {
        let pose = CameraPose::reference();
        let intr = CameraIntrinsics::square(5);
        let bundle = generate_rays(&pose, &intr);
        let center = bundle.rays[2 * 5 + 2];
        let expect = (-pose.origin()).normalized();
        assert!((center.dir - expect).norm() < 1e-12);
    }

    #[test]
    fn small_bundle_is_unit_norm() {
        let bundle = generate_rays(&CameraPose::reference(), &CameraIntrinsics::square(4));
        assert_eq!(bundle.len(), 16);
        for r in &bundle.rays {
            assert!((r.dir.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn corner_ray_angle_matches_pinhole_geometry() {
        for &(fov_deg, size) in &[(40.0, 64usize), (40.0, 9), (2.0, 32)] {
            let intr = CameraIntrinsics::new(f64::to_radians(fov_deg), size, size).unwrap();
            let pose = CameraPose::reference();
            let bundle = generate_rays(&pose, &intr);
            let center = (-pose.origin()).normalized();
            let corner = bundle.rays[0].dir;
            let angle = corner.dot(center).clamp(-1.0, 1.0).acos();
            let h = size as f64;
            let exact = (2f64.sqrt() * (1.0 - 1.0 / h) * (0.5 * intr.vertical_fov).tan()).atan();
            assert!((angle - exact).abs() < 1e-9, "fov {fov_deg}: {angle} vs {exact}");
            if fov_deg < 5.0 {
                // Small-angle form of the same relation.
                let approx = intr.vertical_fov * 2f64.sqrt() / 2.0 * (1.0 - 1.0 / h);
                assert!((angle - approx).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn origin_projects_to_image_center() {
        let p = project(&CameraPose::reference(), &CameraIntrinsics::square(64), Vec3::zero());
        assert!(p.in_frustum && p.u.abs() < 1e-12 && p.v.abs() < 1e-12);
    }

    #[test]
    fn point_behind_camera_is_out_of_frustum() {
        let x = Vec3::new(5.0, 0.0, 0.0);
        assert!(!project(&CameraPose::reference(), &CameraIntrinsics::square(64), x).in_frustum);
    }

    #[test]
    fn unproject_then_project_round_trips() {
        let pose = CameraPose::from_degrees(37.0, 12.0, 3.3).unwrap();
        let intr = CameraIntrinsics::square(16);
        for row in 0..16 {
            for col in 0..16 {
                let (u, v) = intr.pixel_to_ndc(row, col);
                for &t in &[1.8, 2.0, 3.9] {
                    let x = unproject(&pose, &intr, u, v, t);
                    let p = project(&pose, &intr, x);
                    assert!((p.u - u).abs() < 1e-5 && (p.v - v).abs() < 1e-5);
                    let (r, c) = intr.ndc_to_pixel(p.u, p.v);
                    assert!((r - row as f64).abs() < 1e-6 && (c - col as f64).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn sphere_bounds_hit_and_miss() {
        let pose = CameraPose::reference();
        let ray = Ray { origin: pose.origin(), dir: (-pose.origin()).normalized() };
        let (n, f) = sphere_bounds(&ray, 1.5);
        assert!((n - 1.7).abs() < 1e-12 && (f - 4.7).abs() < 1e-12);
        let miss = Ray { origin: pose.origin(), dir: Vec3::new(0.0, 0.0, 1.0) };
        let (n, f) = sphere_bounds(&miss, 1.5);
        assert!((n - 1.7).abs() < 1e-12 && (f - 4.7).abs() < 1e-12);
    }

    #[test]
    fn pose_file_round_trip_and_errors() {
        let rig = canonical_rig();
        assert_eq!(rig.len(), 68);
        let parsed = parse_poses(&format_poses(&rig)).unwrap();
        for (a, b) in rig.iter().zip(&parsed) {
            assert!((a.azimuth - b.azimuth).abs() < 1e-12);
            assert!((a.elevation - b.elevation).abs() < 1e-12);
        }
        assert_eq!(parse_poses("# nothing\n\n"), Err(SceneError::EmptyPoseFile));
        assert!(matches!(parse_poses("1 2\n"), Err(SceneError::PoseFile { line: 1, .. })));
        assert!(matches!(parse_poses("0 0 -1\n"), Err(SceneError::PoseFile { .. })));
    }
}

//! Procedural test objects with exact renders, masks and depths.
//!
//! The sphere has radius 1 and color `0.5 + 0.4·p` at surface point `p`;
//! the cube has half-size 0.7 with one flat color per face. Both sit at the
//! origin in front of a white background.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::constraint::ReferenceConditioning;
use crate::imaging::{ImageError, RgbImage, ScalarMap};
use crate::math::Vec3;
use crate::render::{FieldSample, VolumeField};
use crate::scene::{generate_rays, CameraIntrinsics, CameraPose, Ray};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyShape {
    Sphere,
    Cube,
}

impl std::str::FromStr for ToyShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "cube" => Ok(Self::Cube),
            other => Err(format!("unknown shape `{other}` (expected sphere or cube)")),
        }
    }
}

pub const CUBE_HALF_SIZE: f64 = 0.7;

const FACE_COLORS: [[f64; 3]; 6] =
    [[0.85, 0.25, 0.2], [0.2, 0.65, 0.3], [0.25, 0.35, 0.85], [0.9, 0.75, 0.2], [0.6, 0.3, 0.7], [0.2, 0.7, 0.75]];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3<f64>,
    pub color: [f64; 3],
}

impl ToyShape {
    pub fn contains(&self, x: Vec3<f64>) -> bool {
        match self {
            Self::Sphere => x.norm() <= 1.0,
            Self::Cube => (0..3).all(|k| x[k].abs() <= CUBE_HALF_SIZE),
        }
    }

    pub fn color_at(&self, x: Vec3<f64>) -> [f64; 3] {
        match self {
            Self::Sphere => {
                let p = x.normalized();
                std::array::from_fn(|k| 0.5 + 0.4 * p[k])
            }
            Self::Cube => {
                let k = (0..3).max_by(|&a, &b| x[a].abs().total_cmp(&x[b].abs())).expect("three axes");
                FACE_COLORS[2 * k + usize::from(x[k] < 0.0)]
            }
        }
    }

    /// First intersection of `ray` with the surface.
    pub fn intersect(&self, ray: &Ray<f64>) -> Option<Hit> {
        let t = match self {
            Self::Sphere => {
                let b = ray.origin.dot(ray.dir);
                let c = ray.origin.dot(ray.origin) - 1.0;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t > 0.0).then_some(t)?
            }
            Self::Cube => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    let (o, d) = (ray.origin[k], ray.dir[k]);
                    if d.abs() < 1e-15 {
                        if o.abs() > CUBE_HALF_SIZE {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((-CUBE_HALF_SIZE - o) / d, (CUBE_HALF_SIZE - o) / d);
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                (t0 <= t1 && t0 > 0.0).then_some(t0)?
            }
        };
        let point = ray.at(t);
        Some(Hit { t, point, color: self.color_at(point) })
    }

    /// Exact image (white background), binary mask and ray depth (zero on
    /// background) for one view.
    pub fn render(&self, pose: &CameraPose, intr: &CameraIntrinsics) -> ToyView {
        let bundle = generate_rays(pose, intr);
        let n = bundle.len();
        let mut image = Vec::with_capacity(3 * n);
        let mut mask = Vec::with_capacity(n);
        let mut depth = Vec::with_capacity(n);
        for ray in &bundle.rays {
            match self.intersect(ray) {
                Some(h) => {
                    image.extend(h.color);
                    mask.push(1.0);
                    depth.push(h.t);
                }
                None => {
                    image.extend([1.0; 3]);
                    mask.push(0.0);
                    depth.push(0.0);
                }
            }
        }
        ToyView { width: intr.width, height: intr.height, image, mask, depth }
    }
}

/// Exact render of a toy object in `f64`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyView {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB.
    pub image: Vec<f64>,
    pub mask: Vec<f64>,
    pub depth: Vec<f64>,
}

impl ToyView {
    pub fn rgb(&self) -> RgbImage {
        RgbImage { width: self.width, height: self.height, data: self.image.iter().map(|&v| v as f32).collect() }
    }

    pub fn mask_map(&self) -> ScalarMap {
        ScalarMap { width: self.width, height: self.height, data: self.mask.iter().map(|&v| v as f32).collect() }
    }

    pub fn depth_map(&self) -> ScalarMap {
        ScalarMap { width: self.width, height: self.height, data: self.depth.iter().map(|&v| v as f32).collect() }
    }
}

/// The toy object as a volume: density `sigma` inside, zero outside.
#[derive(Clone, Copy, Debug)]
pub struct ToyVolume {
    pub shape: ToyShape,
    pub sigma: f64,
}

impl VolumeField<f64> for ToyVolume {
    fn sample(&self, x: Vec3<f64>, need_color: bool) -> FieldSample<f64> {
        if !self.shape.contains(x) {
            return FieldSample { sigma: 0.0, color: [0.0; 3] };
        }
        let color = if need_color { self.shape.color_at(x) } else { [0.0; 3] };
        FieldSample { sigma: self.sigma, color }
    }
}

/// Reference conditioning from the exact reference render, optionally with
/// the exact depth as the depth estimate.
pub fn toy_conditioning(shape: ToyShape, size: usize, with_depth: bool) -> ReferenceConditioning {
    let view = shape.render(&CameraPose::reference(), &CameraIntrinsics::square(size));
    let depth = with_depth.then(|| view.depth_map());
    ReferenceConditioning::new(view.rgb(), view.mask_map(), depth, CameraPose::reference(), format!("toy-{shape:?}"))
        .expect("toy renders are well-formed")
}

/// File names written by [`make_toy`].
#[derive(Clone, Debug)]
pub struct ToyFiles {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub depth: PathBuf,
}

/// Writes `image.png`, `mask.png` and `depth.raw` for the reference view.
pub fn make_toy(shape: ToyShape, size: usize, out_dir: &Path) -> Result<ToyFiles, ImageError> {
    std::fs::create_dir_all(out_dir)?;
    let view = shape.render(&CameraPose::reference(), &CameraIntrinsics::square(size));
    let files =
        ToyFiles { image: out_dir.join("image.png"), mask: out_dir.join("mask.png"), depth: out_dir.join("depth.raw") };
    view.rgb().save_png(&files.image)?;
    view.mask_map().save_png(&files.mask)?;
    view.depth_map().save_raw(&files.depth)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::REFERENCE_RADIUS;

    #[test]
    fn sphere_mask_is_a_centered_disk() {
        let v = ToyShape::Sphere.render(&CameraPose::reference(), &CameraIntrinsics::square(33));
        let c = 16.0;
        let mut radius_in: f64 = 0.0;
        let mut radius_out = f64::INFINITY;
        for r in 0..33 {
            for col in 0..33 {
                let d = ((r as f64 - c).powi(2) + (col as f64 - c).powi(2)).sqrt();
                if v.mask[r * 33 + col] == 1.0 {
                    radius_in = radius_in.max(d);
                } else {
                    radius_out = radius_out.min(d);
                }
            }
        }
        assert!(radius_in < radius_out, "mask is not a disk");
        assert_eq!(v.mask[16 * 33 + 16], 1.0);
        assert!((v.depth[16 * 33 + 16] - (REFERENCE_RADIUS - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn cube_front_view_is_a_square() {
        let n = 32;
        let v = ToyShape::Cube.render(&CameraPose::reference(), &CameraIntrinsics::square(n));
        let rows: Vec<usize> = (0..n).filter(|&r| (0..n).any(|c| v.mask[r * n + c] == 1.0)).collect();
        let cols: Vec<usize> = (0..n).filter(|&c| (0..n).any(|r| v.mask[r * n + c] == 1.0)).collect();
        assert_eq!(rows.len(), cols.len());
        let (r0, r1, c0, c1) = (rows[0], *rows.last().unwrap(), cols[0], *cols.last().unwrap());
        for r in r0..=r1 {
            for c in c0..=c1 {
                assert_eq!(v.mask[r * n + c], 1.0);
            }
        }
        assert_eq!(rows.len(), r1 - r0 + 1);
        // The front face (+x) is the only one visible head-on.
        assert_eq!(v.image[3 * (n / 2 * n + n / 2)], FACE_COLORS[0][0]);
    }

    #[test]
    fn make_toy_writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let files = make_toy(ToyShape::Sphere, 16, dir.path()).unwrap();
        let mask = ScalarMap::load_png(&files.mask).unwrap();
        assert!(mask.data.iter().all(|&m| m == 0.0 || m == 1.0));
        let depth = ScalarMap::load_raw(&files.depth).unwrap();
        assert_eq!((depth.width, depth.height), (16, 16));
        assert!("pyramid".parse::<ToyShape>().is_err());
    }
}

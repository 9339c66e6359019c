//! Feature-space metrics over rendered viewpoint sets.
//!
//! With `d(a, b) = 1 − ⟨a, b⟩` on unit feature vectors:
//! - `d_ref` is the mean distance from the reference image to every render;
//! - `d_all` is the mean over all ground-truth × render pairs;
//! - `d_oracle` is the mean cost of the optimal one-to-one matching.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scene::CameraPose;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("zero feature vector at row {0}")]
    ZeroVector(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty feature set")]
    Empty,
    #[error("not a feature file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    Version(u32),
    #[error("feature file is truncated")]
    Truncated,
    #[error("I/O error: {0}")]
    Io(std::io::Error),
}

impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Self::Truncated
        } else {
            Self::Io(e)
        }
    }
}

/// Rows of unit-norm feature vectors, optionally tagged with the pose each
/// row was rendered from.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    /// Row-major `n × dim`.
    pub features: Vec<f64>,
    pub poses: Option<Vec<CameraPose>>,
}

pub const FEATURE_MAGIC: &[u8; 4] = b"CRDF";
pub const FEATURE_VERSION: u32 = 1;

/// Tolerance on `‖row‖ = 1` for already-normalized input.
pub const UNIT_TOLERANCE: f64 = 1e-5;

impl FeatureSet {
    /// Normalizes every row to unit length.
    pub fn from_rows(dim: usize, mut features: Vec<f64>) -> Result<Self, EvalError> {
        if dim == 0 || features.is_empty() {
            return Err(EvalError::Empty);
        }
        if !features.len().is_multiple_of(dim) {
            return Err(EvalError::Shape(format!("{} values do not fill rows of {dim}", features.len())));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite("features"));
        }
        for (i, row) in features.chunks_exact_mut(dim).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(EvalError::ZeroVector(i));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self { dim, features, poses: None })
    }

    pub fn with_poses(mut self, poses: Vec<CameraPose>) -> Result<Self, EvalError> {
        if poses.len() != self.len() {
            return Err(EvalError::Shape(format!("{} poses for {} feature rows", poses.len(), self.len())));
        }
        self.poses = Some(poses);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows at `indices`, in that order, keeping their pose tags.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            dim: self.dim,
            features: indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            poses: self.poses.as_ref().map(|p| indices.iter().map(|&i| p[i]).collect()),
        }
    }

    /// File layout: `"CRDF"`, u32 version, u32 rows, u32 dim, then
    /// `rows × dim` little-endian `f32`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), EvalError> {
        w.write_all(FEATURE_MAGIC)?;
        for v in [FEATURE_VERSION, self.len() as u32, self.dim as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in &self.features {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, EvalError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..4] != FEATURE_MAGIC {
            return Err(EvalError::BadMagic);
        }
        let word = |k: usize| u32::from_le_bytes(header[4 * k..4 * k + 4].try_into().expect("4 bytes"));
        if word(1) != FEATURE_VERSION {
            return Err(EvalError::Version(word(1)));
        }
        let (rows, dim) = (word(2) as usize, word(3) as usize);
        let want = (rows as u64) * (dim as u64) * 4;
        let mut bytes = Vec::new();
        r.take(want).read_to_end(&mut bytes)?;
        if bytes.len() as u64 != want {
            return Err(EvalError::Truncated);
        }
        let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        Self::from_rows(dim, values)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path).map_err(EvalError::Io)?))
    }
}

/// `1 − ⟨a, b⟩` for unit vectors; lies in `[0, 2]`.
pub fn feature_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

fn check_dims(a: &FeatureSet, b: &FeatureSet) -> Result<(), EvalError> {
    if a.dim != b.dim {
        return Err(EvalError::Shape(format!("feature dims {} and {}", a.dim, b.dim)));
    }
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// `out[i][j] = d(gt_i, rendered_j)`.
pub fn distance_matrix(gt: &FeatureSet, rendered: &FeatureSet) -> Result<Vec<Vec<f64>>, EvalError> {
    check_dims(gt, rendered)?;
    Ok((0..gt.len())
        .map(|i| (0..rendered.len()).map(|j| feature_distance(gt.row(i), rendered.row(j))).collect())
        .collect())
}

pub fn d_ref(reference: &[f64], rendered: &FeatureSet) -> Result<f64, EvalError> {
    if reference.len() != rendered.dim {
        return Err(EvalError::Shape(format!("reference has dim {}, renders {}", reference.len(), rendered.dim)));
    }
    if rendered.is_empty() {
        return Err(EvalError::Empty);
    }
    let norm = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(EvalError::ZeroVector(0));
    }
    let unit: Vec<f64> = reference.iter().map(|v| v / norm).collect();
    Ok((0..rendered.len()).map(|j| feature_distance(&unit, rendered.row(j))).sum::<f64>() / rendered.len() as f64)
}

pub fn d_all(gt: &FeatureSet, rendered: &FeatureSet) -> Result<f64, EvalError> {
    let m = distance_matrix(gt, rendered)?;
    let n = (gt.len() * rendered.len()) as f64;
    Ok(m.iter().flatten().sum::<f64>() / n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `columns[i]` is the column matched to row `i`.
    pub columns: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost perfect matching on a square matrix (Kuhn–Munkres with
/// row/column potentials, `O(n³)`).
pub fn linear_sum_assignment(cost: &[Vec<f64>]) -> Result<Assignment, EvalError> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(EvalError::Shape("cost matrix must be square".into()));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite("cost matrix"));
    }
    if n == 0 {
        return Ok(Assignment { columns: Vec::new(), cost: 0.0 });
    }
    // 1-based shortest augmenting paths; column 0 is a virtual source.
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut min_v = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < min_v[j] {
                    min_v[j] = reduced;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut columns = vec![0; n];
    for j in 1..=n {
        columns[row_of[j] - 1] = j - 1;
    }
    let total = columns.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(Assignment { columns, cost: total })
}

/// Mean per-pair cost of the optimal matching between equal-size sets.
pub fn d_oracle(gt: &FeatureSet, rendered: &FeatureSet) -> Result<f64, EvalError> {
    if gt.len() != rendered.len() {
        return Err(EvalError::Shape(format!("{} ground-truth views vs {} renders", gt.len(), rendered.len())));
    }
    let m = distance_matrix(gt, rendered)?;
    Ok(linear_sum_assignment(&m)?.cost / gt.len() as f64)
}

pub const NEAR_ELEVATION_DEG: f64 = 15.0;
pub const NEAR_AZIMUTH_DEG: f64 = 45.0;

/// Absolute angular difference on the circle, in `[0, 180]`.
pub fn circular_difference_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Indices of poses within 15° elevation and 45° azimuth of `reference`.
pub fn near_reference_filter(poses: &[CameraPose], reference: &CameraPose) -> Vec<usize> {
    // Absorbs the degree/radian round trip of pose files.
    const EPS: f64 = 1e-9;
    poses
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            (p.elevation_degrees() - reference.elevation_degrees()).abs() <= NEAR_ELEVATION_DEG + EPS
                && circular_difference_deg(p.azimuth_degrees(), reference.azimuth_degrees()) <= NEAR_AZIMUTH_DEG + EPS
        })
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub d_ref: f64,
    pub d_all: f64,
    pub d_oracle: f64,
    pub n_poses: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub all_views: MetricSet,
    pub near_reference: MetricSet,
    /// Where the pose list and the features came from.
    pub provenance: serde_json::Value,
}

pub fn metric_set(reference: &[f64], gt: &FeatureSet, rendered: &FeatureSet) -> Result<MetricSet, EvalError> {
    Ok(MetricSet {
        d_ref: d_ref(reference, rendered)?,
        d_all: d_all(gt, rendered)?,
        d_oracle: d_oracle(gt, rendered)?,
        n_poses: rendered.len(),
    })
}

/// Both pose sets for row-aligned ground-truth and rendered features.
/// The reference feature defaults to the ground-truth row whose pose is
/// nearest the reference camera.
pub fn evaluate(
    gt: &FeatureSet,
    rendered: &FeatureSet,
    poses: &[CameraPose],
    reference_pose: &CameraPose,
    reference_feature: Option<&[f64]>,
    provenance: serde_json::Value,
) -> Result<EvalReport, EvalError> {
    if gt.len() != poses.len() || rendered.len() != poses.len() {
        return Err(EvalError::Shape(format!(
            "{} poses, {} ground-truth rows, {} rendered rows",
            poses.len(),
            gt.len(),
            rendered.len()
        )));
    }
    let reference = match reference_feature {
        Some(f) => f.to_vec(),
        None => gt.row(nearest_pose(poses, reference_pose)).to_vec(),
    };
    let near = near_reference_filter(poses, reference_pose);
    if near.is_empty() {
        return Err(EvalError::Shape("no poses near the reference".into()));
    }
    Ok(EvalReport {
        all_views: metric_set(&reference, gt, rendered)?,
        near_reference: metric_set(&reference, &gt.subset(&near), &rendered.subset(&near))?,
        provenance,
    })
}

fn nearest_pose(poses: &[CameraPose], target: &CameraPose) -> usize {
    let o = target.origin().normalized();
    (0..poses.len())
        .max_by(|&a, &b| {
            let ca = poses[a].origin().normalized().dot(o);
            let cb = poses[b].origin().normalized().dot(o);
            ca.total_cmp(&cb)
        })
        .expect("non-empty pose list")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::canonical_rig;

    fn set(rows: &[&[f64]]) -> FeatureSet {
        FeatureSet::from_rows(rows[0].len(), rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(feature_distance(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(feature_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(feature_distance(&[1.0, 0.0], &[-1.0, 0.0]), 2.0);
        assert!(matches!(FeatureSet::from_rows(2, vec![0.0, 0.0]), Err(EvalError::ZeroVector(0))));
    }

    #[test]
    fn mean_examples() {
        let e = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(d_all(&e, &e).unwrap(), 0.5);
        assert_eq!(d_ref(&[1.0, 0.0], &set(&[&[1.0, 0.0], &[1.0, 0.0]])).unwrap(), 0.0);
        // Unit vectors at cosine 0.8 and 0.6 to the reference.
        let r = set(&[&[0.8, 0.6], &[0.6, 0.8]]);
        assert!((d_ref(&[1.0, 0.0], &r).unwrap() - 0.3).abs() < 1e-15);
        let single = set(&[&[0.3, 0.4]]);
        assert_eq!(d_all(&single, &single).unwrap(), 0.0);
    }

    #[test]
    fn assignment_examples() {
        let a = linear_sum_assignment(&[vec![4.0, 1.0], vec![2.0, 8.0]]).unwrap();
        assert_eq!((a.columns, a.cost), (vec![1, 0], 3.0));
        let id: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| if i == j { 0.0 } else { 1.0 }).collect()).collect();
        let a = linear_sum_assignment(&id).unwrap();
        assert_eq!((a.columns, a.cost), (vec![0, 1, 2, 3, 4], 0.0));
        assert!(linear_sum_assignment(&[vec![f64::NAN]]).is_err());
        assert!(linear_sum_assignment(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn permuted_copy_has_zero_oracle_distance() {
        let a = set(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let b = a.subset(&[2, 0, 1]);
        assert!(d_oracle(&a, &b).unwrap().abs() < 1e-15);
        assert!(d_all(&a, &b).unwrap() > 0.5);
    }

    #[test]
    fn near_reference_examples() {
        let r = CameraPose::reference();
        let p = |az: f64, el: f64| CameraPose::from_degrees(az, el, 3.2).unwrap();
        assert_eq!(near_reference_filter(&[r, p(350.0, 0.0), p(0.0, 20.0), p(46.0, 0.0)], &r), vec![0, 1]);
        assert_eq!(near_reference_filter(&canonical_rig(), &r).len(), 15);
    }

    #[test]
    fn feature_file_round_trip_and_errors() {
        let a = set(&[&[0.5, 0.5, 0.5, 0.5], &[1.0, 0.0, 0.0, 0.0]]);
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 16 + 2 * 4 * 4);
        assert_eq!(FeatureSet::read_from(&bytes[..]).unwrap(), a);
        assert!(matches!(FeatureSet::read_from(&bytes[..20]), Err(EvalError::Truncated)));
        bytes[0] = b'X';
        assert!(matches!(FeatureSet::read_from(&bytes[..]), Err(EvalError::BadMagic)));
    }

    #[test]
    fn report_on_identical_sets_is_zero() {
        let rig = canonical_rig();
        let rows: Vec<f64> =
            (0..rig.len()).flat_map(|i| (0..8).map(move |k| ((i * 7 + k * 3) % 11) as f64 + 0.5)).collect();
        let f = FeatureSet::from_rows(8, rows).unwrap();
        let rep = evaluate(&f, &f, &rig, &CameraPose::reference(), None, serde_json::Value::Null).unwrap();
        assert_eq!(rep.near_reference.n_poses, 15);
        assert_eq!(rep.all_views.n_poses, 68);
        assert!(rep.all_views.d_oracle.abs() < 1e-12);
        assert!(rep.near_reference.d_ref.abs() > 0.0);
    }
}

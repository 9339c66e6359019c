//! Image constraints on the radiance field.
//!
//! Inside the reference frustum, points in front of the visible surface take
//! the reference image's color, and density is scaled by the foreground mask.
//! Both substitutions are blended in by a warm-start factor `α`:
//!
//! * `c′ = v·Î(Q(x)) + (1 − v)·c`, with `v = α·[‖x − o‖ ≤ V(Q(x))]`
//! * `σ′ = (1 − α(1 − M̂(Q(x))))·σ`
//!
//! where `Q` projects onto the reference image and `V` is the visibility
//! depth, the ray distance at which the cumulative rendering weight first
//! reaches `1 − η` of the total.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::field::{FieldScratch, RadianceField};
use crate::grad::{GradAccumulator, ParamStore};
use crate::imaging::{bilinear_taps, RgbImage, ScalarMap};
use crate::math::{Real, Vec3};
use crate::render::{
    render_recorded, DifferentiableField, FieldSample, MarchConfig, RenderError, ViewRecord, VolumeField,
};
use crate::scene::{generate_rays, project_with_frame, CameraFrame, CameraIntrinsics, CameraPose, RayBundle};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConstraintError {
    #[error("η must lie in (0, 1), got {0}")]
    Eta(f64),
    #[error("warm-start step {step} outside 0..={total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("invalid warm-start schedule: {0}")]
    Schedule(String),
    #[error("conditioning maps disagree: {0}")]
    Shape(String),
    #[error("invalid conditioning values: {0}")]
    Values(String),
    #[error(transparent)]
    Render(#[from] RenderError),
}

pub const DEFAULT_ETA: f64 = 0.1;

/// Points at most this far behind the visibility depth still count as
/// visible, so the sample the depth was read from is itself constrained.
pub const VISIBILITY_TOLERANCE: f64 = 1e-4;

/// Everything known about the input view.
#[derive(Clone, Debug)]
pub struct ReferenceConditioning {
    pub image: RgbImage,
    pub mask: ScalarMap,
    /// Relative depth estimate; the depth loss is skipped without it.
    pub depth: Option<ScalarMap>,
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
    pub cond_id: String,
}

impl ReferenceConditioning {
    pub fn new(
        image: RgbImage,
        mask: ScalarMap,
        depth: Option<ScalarMap>,
        pose: CameraPose,
        cond_id: impl Into<String>,
    ) -> Result<Self, ConstraintError> {
        let (w, h) = (image.width, image.height);
        if (mask.width, mask.height) != (w, h) {
            return Err(ConstraintError::Shape(format!("mask is {}x{}, image is {w}x{h}", mask.width, mask.height)));
        }
        if let Some(d) = &depth {
            if (d.width, d.height) != (w, h) {
                return Err(ConstraintError::Shape(format!("depth is {}x{}, image is {w}x{h}", d.width, d.height)));
            }
            if !d.data.iter().all(|v| v.is_finite()) {
                return Err(ConstraintError::Values("depth map has non-finite entries".into()));
            }
        }
        if !image.all_finite() {
            return Err(ConstraintError::Values("image has non-finite entries".into()));
        }
        if !mask.data.iter().all(|m| (0.0..=1.0).contains(m)) {
            return Err(ConstraintError::Values("mask values must lie in [0, 1]".into()));
        }
        let intrinsics = CameraIntrinsics { width: w, height: h, ..CameraIntrinsics::square(w) };
        Ok(Self { image, mask, depth, pose, intrinsics, cond_id: cond_id.into() })
    }

    /// Rays through every reference pixel, computed once per run.
    pub fn rays(&self) -> RayBundle {
        generate_rays(&self.pose, &self.intrinsics)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityDepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl VisibilityDepthMap {
    pub fn bilinear(&self, row: f64, col: f64) -> f64 {
        bilinear_taps(self.width, self.height, row, col).iter().map(|&(i, w)| w * self.depth[i]).sum()
    }

    pub fn to_scalar_map(&self) -> ScalarMap {
        ScalarMap { width: self.width, height: self.height, data: self.depth.iter().map(|&v| v as f32).collect() }
    }
}

/// Depth of the first sample whose cumulative weight reaches
/// `(1 − η)·Σw`, or `None` when the total weight is below `1e-4`.
pub fn visibility_depth_from_weights(t: &[f64], weights: &[f64], eta: f64) -> Option<f64> {
    let total: f64 = weights.iter().sum();
    if total < 1e-4 {
        return None;
    }
    let threshold = (1.0 - eta) * total;
    let mut acc = 0.0;
    for (&ti, &wi) in t.iter().zip(weights) {
        acc += wi;
        if acc >= threshold {
            return Some(ti);
        }
    }
    t.last().copied()
}

fn check_eta(eta: f64) -> Result<(), ConstraintError> {
    if eta > 0.0 && eta < 1.0 {
        Ok(())
    } else {
        Err(ConstraintError::Eta(eta))
    }
}

/// Visibility depth from an existing density-only render of the reference
/// rays, sparing a second pass when the same samples also feed the depth
/// loss.
pub fn visibility_from_record<S: Real>(
    record: &ViewRecord<S>,
    bundle: &RayBundle,
    config: &MarchConfig,
    eta: f64,
) -> Result<VisibilityDepthMap, ConstraintError> {
    check_eta(eta)?;
    let n = record.n_rays();
    let mut depth = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for i in 0..n {
        let rs = record.ray_samples(i);
        let t: Vec<f64> = rs.t.iter().map(|v| v.to_f64()).collect();
        let w: Vec<f64> = rs.weight.iter().map(|v| v.to_f64()).collect();
        match visibility_depth_from_weights(&t, &w, eta) {
            Some(v) => {
                depth.push(v);
                valid.push(true);
            }
            None => {
                depth.push(config.ray_interval(&bundle.rays[i]).1);
                valid.push(false);
            }
        }
    }
    Ok(VisibilityDepthMap { width: record.view.width, height: record.view.height, depth, valid })
}

/// Marches `field`'s density along the reference rays at unjittered
/// sample positions and reads off the visibility depth per pixel.
pub fn compute_visibility_depth<S: Real, F: VolumeField<S> + ?Sized>(
    field: &F,
    reference_rays: &RayBundle,
    config: &MarchConfig,
    eta: f64,
) -> Result<VisibilityDepthMap, ConstraintError> {
    check_eta(eta)?;
    let config = MarchConfig { perturb: false, ..config.clone() };
    let record = render_recorded::<S, F, rand::rngs::ThreadRng>(reference_rays, field, &config, None, false)?;
    visibility_from_record(&record, reference_rays, &config, eta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmStartSchedule {
    pub total_steps: u64,
    pub plateau_fraction: f64,
}

impl Default for WarmStartSchedule {
    fn default() -> Self {
        Self { total_steps: 5000, plateau_fraction: 0.5 }
    }
}

impl WarmStartSchedule {
    pub fn validate(&self) -> Result<(), ConstraintError> {
        if self.total_steps == 0 {
            return Err(ConstraintError::Schedule("total_steps must be positive".into()));
        }
        if !(self.plateau_fraction > 0.0 && self.plateau_fraction <= 1.0) {
            return Err(ConstraintError::Schedule("plateau_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// `min(1, step / (plateau_fraction · total_steps))`
pub fn warm_alpha(step: u64, schedule: &WarmStartSchedule) -> Result<f64, ConstraintError> {
    schedule.validate()?;
    if step > schedule.total_steps {
        return Err(ConstraintError::StepOutOfRange { step, total: schedule.total_steps });
    }
    let ramp = schedule.plateau_fraction * schedule.total_steps as f64;
    Ok((step as f64 / ramp).min(1.0))
}

/// Per-point blend factors of the constraint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintFactors {
    /// Effective visibility `α·v_x`.
    pub visibility: f64,
    /// Density multiplier `1 − α(1 − m_x)`.
    pub density_scale: f64,
    /// Bilinear reference color at the projection.
    pub pixel: [f64; 3],
}

impl ConstraintFactors {
    pub const NONE: Self = Self { visibility: 0.0, density_scale: 1.0, pixel: [0.0; 3] };
}

/// The constraint at one warm-start level and visibility map.
#[derive(Clone, Debug)]
pub struct Constraint<'a> {
    pub conditioning: &'a ReferenceConditioning,
    /// Without a map no point is visible; only the density constraint acts.
    pub visibility: Option<&'a VisibilityDepthMap>,
    pub alpha: f64,
    frame: CameraFrame,
}

impl<'a> Constraint<'a> {
    pub fn new(
        conditioning: &'a ReferenceConditioning,
        visibility: Option<&'a VisibilityDepthMap>,
        alpha: f64,
    ) -> Self {
        Self { conditioning, visibility, alpha, frame: conditioning.pose.frame() }
    }

    pub fn factors(&self, x: Vec3<f64>) -> ConstraintFactors {
        let cond = self.conditioning;
        let p = project_with_frame(&self.frame, &cond.intrinsics, x);
        if !p.in_frustum || self.alpha == 0.0 {
            return ConstraintFactors::NONE;
        }
        let (row, col) = cond.intrinsics.ndc_to_pixel(p.u, p.v);
        let taps = bilinear_taps(cond.image.width, cond.image.height, row, col);
        let m: f64 = taps.iter().map(|&(i, w)| w * cond.mask.data[i] as f64).sum();
        let density_scale = 1.0 - self.alpha * (1.0 - m);
        let Some(vis_map) = self.visibility else {
            return ConstraintFactors { visibility: 0.0, density_scale, pixel: [0.0; 3] };
        };
        let v: f64 = taps.iter().map(|&(i, w)| w * vis_map.depth[i]).sum();
        let dist = (x - self.frame.origin).norm();
        if dist > v + VISIBILITY_TOLERANCE {
            return ConstraintFactors { visibility: 0.0, density_scale, pixel: [0.0; 3] };
        }
        let mut pixel = [0.0; 3];
        for &(i, w) in &taps {
            if w != 0.0 {
                for k in 0..3 {
                    pixel[k] += w * cond.image.data[3 * i + k] as f64;
                }
            }
        }
        ConstraintFactors { visibility: self.alpha, density_scale, pixel }
    }
}

/// `c′ = v·Î + (1 − v)·c_raw` for the factors at `x`.
pub fn constrained_color<S: Real>(c_raw: [S; 3], f: &ConstraintFactors) -> [S; 3] {
    if f.visibility == 0.0 {
        return c_raw;
    }
    let v = S::from_f64(f.visibility);
    std::array::from_fn(|k| v * S::from_f64(f.pixel[k]) + (S::ONE - v) * c_raw[k])
}

/// `σ′ = (1 − α(1 − m))·σ_raw` for the factors at `x`.
pub fn constrained_density<S: Real>(sigma_raw: S, f: &ConstraintFactors) -> S {
    S::from_f64(f.density_scale) * sigma_raw
}

/// The trainable field seen through an optional constraint.
pub struct ConstrainedField<'a, S: Real> {
    pub field: &'a RadianceField,
    pub params: &'a ParamStore<S>,
    pub constraint: Option<Constraint<'a>>,
    scratch: RefCell<FieldScratch<S>>,
}

impl<'a, S: Real> ConstrainedField<'a, S> {
    pub fn new(field: &'a RadianceField, params: &'a ParamStore<S>, constraint: Option<Constraint<'a>>) -> Self {
        Self { field, params, constraint, scratch: RefCell::new(FieldScratch::default()) }
    }

    pub fn unconstrained(field: &'a RadianceField, params: &'a ParamStore<S>) -> Self {
        Self::new(field, params, None)
    }

    fn factors(&self, x: Vec3<S>) -> ConstraintFactors {
        match &self.constraint {
            Some(c) => c.factors(x.to_f64()),
            None => ConstraintFactors::NONE,
        }
    }
}

impl<S: Real> VolumeField<S> for ConstrainedField<'_, S> {
    fn sample(&self, x: Vec3<S>, need_color: bool) -> FieldSample<S> {
        let f = self.factors(x);
        if f.density_scale == 0.0 {
            // Zero density means zero weight, so the raw color never matters.
            return FieldSample { sigma: S::ZERO, color: constrained_color([S::ZERO; 3], &f) };
        }
        let raw = self.field.eval(self.params, x, need_color, &mut self.scratch.borrow_mut());
        FieldSample {
            sigma: constrained_density(raw.sigma, &f),
            color: if need_color { constrained_color(raw.color, &f) } else { raw.color },
        }
    }
}

impl<S: Real> DifferentiableField<S> for ConstrainedField<'_, S> {
    type Scratch = FieldScratch<S>;

    fn backward(
        &self,
        x: Vec3<S>,
        g_sigma: S,
        g_color: Option<[S; 3]>,
        scratch: &mut FieldScratch<S>,
        grads: &mut GradAccumulator<S>,
    ) {
        let f = self.factors(x);
        let g_sigma = g_sigma * S::from_f64(f.density_scale);
        let keep = S::from_f64(1.0 - f.visibility);
        let g_color = g_color.map(|g| g.map(|v| v * keep)).filter(|g| g.iter().any(|v| *v != S::ZERO));
        if g_sigma == S::ZERO && g_color.is_none() {
            return;
        }
        self.field.backward(self.params, x, g_sigma, g_color, scratch, grads);
    }
}

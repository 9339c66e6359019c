//! Quadrature of the volume rendering integral along rays.
//!
//! With `δᵢ = tᵢ₊₁ − tᵢ` (the last interval runs to `far`),
//! `aᵢ = 1 − exp(−σᵢδᵢ)`, `Tᵢ = Πⱼ<ᵢ(1 − aⱼ)` and `wᵢ = Tᵢaᵢ`:
//! color `Σwᵢcᵢ + (1 − Σwᵢ)·background`, depth `Σwᵢtᵢ / max(Σwᵢ, 1e-6)`,
//! alpha `Σwᵢ`.
//!
//! Differentiable rendering records the per-sample quadrature inputs on a
//! [`ViewRecord`]; [`ViewRecord::backward`] replays each ray in reverse and
//! re-evaluates the field at the sample points to push gradients into the
//! parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grad::{GradAccumulator, GradError};
use crate::imaging::{RgbImage, ScalarMap};
use crate::math::{Real, Vec3};
use crate::scene::{generate_rays, sphere_bounds, CameraIntrinsics, CameraPose, Ray, RayBundle, SCENE_BOUND_RADIUS};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RenderError {
    #[error("non-finite field value at sample {sample} of ray {ray}")]
    NonFinite { ray: usize, sample: usize },
    #[error("invalid march configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Point samples of a (possibly constrained) field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample<S> {
    pub sigma: S,
    pub color: [S; 3],
}

pub trait VolumeField<S: Real> {
    /// Density and, when `need_color`, color at `x`.
    fn sample(&self, x: Vec3<S>, need_color: bool) -> FieldSample<S>;

    fn density(&self, x: Vec3<S>) -> S {
        self.sample(x, false).sigma
    }
}

/// A field whose outputs depend on trainable parameters.
pub trait DifferentiableField<S: Real>: VolumeField<S> {
    type Scratch: Default;

    /// Adds the parameter gradient of `g_sigma·σ(x) + ⟨g_color, c(x)⟩`.
    fn backward(
        &self,
        x: Vec3<S>,
        g_sigma: S,
        g_color: Option<[S; 3]>,
        scratch: &mut Self::Scratch,
        grads: &mut GradAccumulator<S>,
    );
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RayBounds {
    /// Intersect each ray with an origin-centred sphere.
    Sphere {
        radius: f64,
    },
    Fixed {
        near: f64,
        far: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarchConfig {
    pub n_samples: usize,
    pub bounds: RayBounds,
    /// Jitter each stratum's sample uniformly; otherwise use its midpoint.
    pub perturb: bool,
    pub background: [f64; 3],
    /// Stop marching once transmittance drops below this; 0 marches every
    /// sample.
    pub min_transmittance: f64,
}

impl Default for MarchConfig {
    fn default() -> Self {
        Self {
            n_samples: 128,
            bounds: RayBounds::Sphere { radius: SCENE_BOUND_RADIUS },
            perturb: false,
            background: [1.0; 3],
            min_transmittance: 0.0,
        }
    }
}

impl MarchConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.n_samples < 2 {
            return Err(RenderError::Config("n_samples must be at least 2".into()));
        }
        match self.bounds {
            RayBounds::Fixed { near, far } if !(near < far) => {
                return Err(RenderError::Config(format!("near {near} must be below far {far}")))
            }
            RayBounds::Sphere { radius } if !(radius > 0.0) => {
                return Err(RenderError::Config("bounding sphere radius must be positive".into()))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.min_transmittance) {
            return Err(RenderError::Config("min_transmittance must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn ray_interval(&self, ray: &Ray<f64>) -> (f64, f64) {
        match self.bounds {
            RayBounds::Sphere { radius } => sphere_bounds(ray, radius),
            RayBounds::Fixed { near, far } => (near, far),
        }
    }
}

/// Sample depths along `[near, far]`, one per stratum, with their
/// quadrature intervals.
pub fn sample_depths<R: Rng + ?Sized>(near: f64, far: f64, n: usize, jitter: Option<&mut R>) -> (Vec<f64>, Vec<f64>) {
    let step = (far - near) / n as f64;
    let t: Vec<f64> = match jitter {
        Some(rng) => (0..n).map(|i| near + (i as f64 + rng.random::<f64>()) * step).collect(),
        None => (0..n).map(|i| near + (i as f64 + 0.5) * step).collect(),
    };
    let mut delta = Vec::with_capacity(n);
    for i in 0..n {
        delta.push(if i + 1 < n { t[i + 1] - t[i] } else { far - t[i] });
    }
    (t, delta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarchResult<S> {
    pub color: [S; 3],
    pub depth: S,
    pub alpha: S,
    pub weights: Vec<S>,
    pub t: Vec<S>,
}

/// Per-sample quadrature quantities from densities and intervals.
pub fn opacities_and_weights<S: Real>(sigma: &[S], delta: &[S]) -> (Vec<S>, Vec<S>) {
    let mut a = Vec::with_capacity(sigma.len());
    let mut w = Vec::with_capacity(sigma.len());
    let mut trans = S::ONE;
    for (&s, &d) in sigma.iter().zip(delta) {
        let survive = (-(s * d)).exp();
        let ai = S::ONE - survive;
        a.push(ai);
        w.push(trans * ai);
        trans *= survive;
    }
    (a, w)
}

fn depth_normalizer<S: Real>(alpha: S) -> S {
    alpha.max(S::from_f64(1e-6))
}

/// Renders one ray. Samples at midpoints unless `rng` is given and the
/// configuration asks for jitter.
pub fn march<S: Real, F: VolumeField<S> + ?Sized, R: Rng + ?Sized>(
    ray: &Ray<f64>,
    field: &F,
    config: &MarchConfig,
    rng: Option<&mut R>,
) -> Result<MarchResult<S>, RenderError> {
    let rec = march_samples(ray, field, config, rng, true, 0)?;
    let (_, weights) = opacities_and_weights(&rec.sigma, &rec.delta);
    Ok(MarchResult { color: rec.color_out, depth: rec.depth, alpha: rec.alpha, weights, t: rec.t })
}

struct RaySamples<S> {
    t: Vec<S>,
    delta: Vec<S>,
    sigma: Vec<S>,
    color: Vec<[S; 3]>,
    color_out: [S; 3],
    depth: S,
    alpha: S,
}

fn march_samples<S: Real, F: VolumeField<S> + ?Sized, R: Rng + ?Sized>(
    ray: &Ray<f64>,
    field: &F,
    config: &MarchConfig,
    rng: Option<&mut R>,
    need_color: bool,
    ray_index: usize,
) -> Result<RaySamples<S>, RenderError> {
    let (near, far) = config.ray_interval(ray);
    let jitter = if config.perturb { rng } else { None };
    let (t64, d64) = sample_depths(near, far, config.n_samples, jitter);
    let ray_s: Ray<S> = ray.cast();
    let min_t = S::from_f64(config.min_transmittance);
    let bg = config.background.map(S::from_f64);

    let mut out = RaySamples {
        t: Vec::with_capacity(t64.len()),
        delta: Vec::with_capacity(t64.len()),
        sigma: Vec::with_capacity(t64.len()),
        color: Vec::with_capacity(if need_color { t64.len() } else { 0 }),
        color_out: [S::ZERO; 3],
        depth: S::ZERO,
        alpha: S::ZERO,
    };
    let mut trans = S::ONE;
    let mut acc_c = [S::ZERO; 3];
    let mut acc_t = S::ZERO;
    for (i, (&t, &d)) in t64.iter().zip(&d64).enumerate() {
        if trans < min_t {
            break;
        }
        let t = S::from_f64(t);
        let d = S::from_f64(d);
        let s = field.sample(ray_s.at(t), need_color);
        if !s.sigma.is_finite() || (need_color && !s.color.iter().all(|c| c.is_finite())) {
            return Err(RenderError::NonFinite { ray: ray_index, sample: i });
        }
        let survive = (-(s.sigma * d)).exp();
        let w = trans * (S::ONE - survive);
        for k in 0..3 {
            acc_c[k] += w * s.color[k];
        }
        acc_t += w * t;
        out.alpha += w;
        trans *= survive;
        out.t.push(t);
        out.delta.push(d);
        out.sigma.push(s.sigma);
        if need_color {
            out.color.push(s.color);
        }
    }
    for k in 0..3 {
        out.color_out[k] = acc_c[k] + (S::ONE - out.alpha) * bg[k];
    }
    out.depth = acc_t / depth_normalizer(out.alpha);
    Ok(out)
}

/// A rendered view: row-major color, depth and alpha maps.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView<S> {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[S; 3]>,
    pub depth: Vec<S>,
    pub alpha: Vec<S>,
}

impl<S: Real> RenderedView<S> {
    pub fn to_image(&self) -> RgbImage {
        let data = self.color.iter().flat_map(|c| c.map(|v| v.to_f64() as f32)).collect();
        RgbImage { width: self.width, height: self.height, data }
    }

    pub fn depth_map(&self) -> ScalarMap {
        ScalarMap {
            width: self.width,
            height: self.height,
            data: self.depth.iter().map(|v| v.to_f64() as f32).collect(),
        }
    }

    pub fn alpha_map(&self) -> ScalarMap {
        ScalarMap {
            width: self.width,
            height: self.height,
            data: self.alpha.iter().map(|v| v.to_f64() as f32).collect(),
        }
    }
}

pub fn render_rays<S: Real, F: VolumeField<S> + ?Sized, R: Rng + ?Sized>(
    bundle: &RayBundle,
    field: &F,
    config: &MarchConfig,
    mut rng: Option<&mut R>,
    need_color: bool,
) -> Result<RenderedView<S>, RenderError> {
    config.validate()?;
    let mut view = RenderedView {
        width: bundle.width,
        height: bundle.height,
        color: Vec::with_capacity(bundle.len()),
        depth: Vec::with_capacity(bundle.len()),
        alpha: Vec::with_capacity(bundle.len()),
    };
    for (i, ray) in bundle.rays.iter().enumerate() {
        let r = march_samples(ray, field, config, rng.as_deref_mut(), need_color, i)?;
        view.color.push(r.color_out);
        view.depth.push(r.depth);
        view.alpha.push(r.alpha);
    }
    Ok(view)
}

/// Renders every pixel of `pose` with deterministic midpoint sampling.
pub fn render_view<S: Real, F: VolumeField<S> + ?Sized>(
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    field: &F,
    config: &MarchConfig,
) -> Result<RenderedView<S>, RenderError> {
    let bundle = generate_rays(pose, intrinsics);
    let config = MarchConfig { perturb: false, ..config.clone() };
    render_rays::<S, F, rand::rngs::ThreadRng>(&bundle, field, &config, None, true)
}

#[derive(Clone, Copy, Debug)]
struct RayMeta<S> {
    ray: Ray<S>,
    start: usize,
    len: usize,
    alpha: S,
    /// `Σ wᵢtᵢ`
    weighted_t: S,
}

/// Forward record of a differentiable render.
#[derive(Clone, Debug)]
pub struct ViewRecord<S> {
    pub view: RenderedView<S>,
    rays: Vec<RayMeta<S>>,
    t: Vec<S>,
    delta: Vec<S>,
    sigma: Vec<S>,
    color: Vec<[S; 3]>,
    has_color: bool,
    background: [S; 3],
}

/// Per-ray sample slices exposed to the regularizers.
pub struct RaySampleView<'a, S> {
    pub ray: Ray<S>,
    pub t: &'a [S],
    pub opacity: Vec<S>,
    pub weight: Vec<S>,
    /// Offset of this ray's first sample in the flat sample arrays.
    pub offset: usize,
}

/// Adjoints seeding [`ViewRecord::backward`]. Empty vectors mean "no
/// gradient through this output". Per-sample vectors are indexed like the
/// flat sample arrays of the record.
#[derive(Clone, Debug, Default)]
pub struct ViewAdjoint<S> {
    pub color: Vec<[S; 3]>,
    pub depth: Vec<S>,
    pub alpha: Vec<S>,
    pub opacity: Vec<S>,
    pub weight: Vec<S>,
}

impl<S: Real> ViewRecord<S> {
    pub fn n_rays(&self) -> usize {
        self.rays.len()
    }

    pub fn n_samples(&self) -> usize {
        self.t.len()
    }

    pub fn ray_samples(&self, i: usize) -> RaySampleView<'_, S> {
        let m = &self.rays[i];
        let r = m.start..m.start + m.len;
        let (opacity, weight) = opacities_and_weights(&self.sigma[r.clone()], &self.delta[r.clone()]);
        RaySampleView { ray: m.ray, t: &self.t[r], opacity, weight, offset: m.start }
    }

    /// Sample point `j` of ray `i` in world space.
    pub fn point(&self, i: usize, j: usize) -> Vec3<S> {
        let m = &self.rays[i];
        m.ray.at(self.t[m.start + j])
    }

    fn check(len: usize, expected: usize) -> Result<(), GradError> {
        if len != 0 && len != expected {
            return Err(GradError::AdjointShape { expected, got: len });
        }
        Ok(())
    }

    pub fn backward<F: DifferentiableField<S> + ?Sized>(
        &self,
        field: &F,
        adjoint: &ViewAdjoint<S>,
        grads: &mut GradAccumulator<S>,
    ) -> Result<(), RenderError> {
        let n = self.rays.len();
        Self::check(adjoint.color.len(), n)?;
        Self::check(adjoint.depth.len(), n)?;
        Self::check(adjoint.alpha.len(), n)?;
        Self::check(adjoint.opacity.len(), self.t.len())?;
        Self::check(adjoint.weight.len(), self.t.len())?;
        if !adjoint.color.is_empty() && !self.has_color {
            return Err(RenderError::Config("color adjoint supplied for a density-only render".into()));
        }
        let mut scratch = F::Scratch::default();
        let mut gw = Vec::new();
        let mut ga = Vec::new();
        let mut trans = Vec::new();
        for (i, m) in self.rays.iter().enumerate() {
            let g_c = adjoint.color.get(i).copied().unwrap_or([S::ZERO; 3]);
            let g_d = adjoint.depth.get(i).copied().unwrap_or(S::ZERO);
            let g_alpha = adjoint.alpha.get(i).copied().unwrap_or(S::ZERO);
            let range = m.start..m.start + m.len;
            let ext_a = adjoint.opacity.get(range.clone());
            let ext_w = adjoint.weight.get(range.clone());
            let any_sample_seed = ext_a.is_some_and(|s| s.iter().any(|v| *v != S::ZERO))
                || ext_w.is_some_and(|s| s.iter().any(|v| *v != S::ZERO));
            if g_c.iter().all(|v| *v == S::ZERO) && g_d == S::ZERO && g_alpha == S::ZERO && !any_sample_seed {
                continue;
            }
            let t = &self.t[range.clone()];
            let delta = &self.delta[range.clone()];
            let sigma = &self.sigma[range.clone()];
            let (a, w) = opacities_and_weights(sigma, delta);
            let norm = depth_normalizer(m.alpha);
            let depth_active = m.alpha > S::from_f64(1e-6);

            gw.clear();
            for j in 0..m.len {
                let mut g = g_alpha;
                if self.has_color {
                    let c = self.color[m.start + j];
                    for k in 0..3 {
                        g += g_c[k] * (c[k] - self.background[k]);
                    }
                }
                let mut dd = t[j] / norm;
                if depth_active {
                    dd -= m.weighted_t / (norm * norm);
                }
                g += g_d * dd;
                if let Some(e) = ext_w {
                    g += e[j];
                }
                gw.push(g);
            }
            // dL/daₖ = gₐₖ + Tₖ(g_wₖ − Rₖ), Rₖ = g_wₖ₊₁aₖ₊₁ + (1 − aₖ₊₁)Rₖ₊₁
            trans.clear();
            let mut tr = S::ONE;
            for &aj in &a {
                trans.push(tr);
                tr *= S::ONE - aj;
            }
            ga.clear();
            ga.resize(m.len, S::ZERO);
            let mut r = S::ZERO;
            for j in (0..m.len).rev() {
                ga[j] = trans[j] * (gw[j] - r);
                if let Some(e) = ext_a {
                    ga[j] += e[j];
                }
                r = gw[j] * a[j] + (S::ONE - a[j]) * r;
            }
            for j in 0..m.len {
                let survive = (-(sigma[j] * delta[j])).exp();
                let g_sigma = ga[j] * delta[j] * survive;
                let g_color = if self.has_color {
                    let gc: [S; 3] = std::array::from_fn(|k| g_c[k] * w[j]);
                    Some(gc)
                } else {
                    None
                };
                let color_live = g_color.is_some_and(|c| c.iter().any(|v| *v != S::ZERO));
                if g_sigma == S::ZERO && !color_live {
                    continue;
                }
                let x = m.ray.at(t[j]);
                field.backward(x, g_sigma, if color_live { g_color } else { None }, &mut scratch, grads);
            }
        }
        Ok(())
    }
}

/// Differentiable render of a ray bundle.
pub fn render_recorded<S: Real, F: VolumeField<S> + ?Sized, R: Rng + ?Sized>(
    bundle: &RayBundle,
    field: &F,
    config: &MarchConfig,
    mut rng: Option<&mut R>,
    need_color: bool,
) -> Result<ViewRecord<S>, RenderError> {
    config.validate()?;
    let n = bundle.len();
    let mut rec = ViewRecord {
        view: RenderedView {
            width: bundle.width,
            height: bundle.height,
            color: Vec::with_capacity(n),
            depth: Vec::with_capacity(n),
            alpha: Vec::with_capacity(n),
        },
        rays: Vec::with_capacity(n),
        t: Vec::with_capacity(n * config.n_samples),
        delta: Vec::with_capacity(n * config.n_samples),
        sigma: Vec::with_capacity(n * config.n_samples),
        color: Vec::with_capacity(if need_color { n * config.n_samples } else { 0 }),
        has_color: need_color,
        background: config.background.map(S::from_f64),
    };
    for (i, ray) in bundle.rays.iter().enumerate() {
        let r = march_samples(ray, field, config, rng.as_deref_mut(), need_color, i)?;
        let start = rec.t.len();
        let weighted_t = r.depth * depth_normalizer(r.alpha);
        rec.rays.push(RayMeta { ray: ray.cast(), start, len: r.t.len(), alpha: r.alpha, weighted_t });
        rec.view.color.push(r.color_out);
        rec.view.depth.push(r.depth);
        rec.view.alpha.push(r.alpha);
        rec.t.extend_from_slice(&r.t);
        rec.delta.extend_from_slice(&r.delta);
        rec.sigma.extend_from_slice(&r.sigma);
        rec.color.extend_from_slice(&r.color);
    }
    Ok(rec)
}

/// Surface normal from central differences of the density, `n = −∇σ/‖∇σ‖`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normal<S> {
    pub n: Vec3<S>,
    /// Set when `‖∇σ‖ < 1e-8`; `n` is then zero.
    pub degenerate: bool,
    grad: Vec3<S>,
}

pub const NORMAL_STEP: f64 = 1e-3;

pub fn normal_at<S: Real, F: VolumeField<S> + ?Sized>(x: Vec3<S>, field: &F, h: S) -> Normal<S> {
    let mut g = Vec3::zero();
    for k in 0..3 {
        let e = Vec3::axis(k) * h;
        g[k] = (field.density(x + e) - field.density(x - e)) / (h + h);
    }
    let len = g.norm();
    if !(len >= S::from_f64(1e-8)) {
        return Normal { n: Vec3::zero(), degenerate: true, grad: g };
    }
    Normal { n: -(g / len), degenerate: false, grad: g }
}

/// Pushes `∂L/∂n` back through the normalization and the six density
/// probes of [`normal_at`].
pub fn normal_backward<S: Real, F: DifferentiableField<S> + ?Sized>(
    x: Vec3<S>,
    normal: &Normal<S>,
    g_n: Vec3<S>,
    h: S,
    field: &F,
    scratch: &mut F::Scratch,
    grads: &mut GradAccumulator<S>,
) {
    if normal.degenerate {
        return;
    }
    let len = normal.grad.norm();
    let u = normal.grad / len;
    // n = −u, ∂u/∂g = (I − uuᵀ)/‖g‖
    let g_g = -(g_n - u * u.dot(g_n)) / len;
    for k in 0..3 {
        let coeff = g_g[k] / (h + h);
        if coeff == S::ZERO {
            continue;
        }
        let e = Vec3::axis(k) * h;
        field.backward(x + e, coeff, None, scratch, grads);
        field.backward(x - e, -coeff, None, scratch, grads);
    }
}

//! Loss terms.
//!
//! The score-distillation term has no scalar loss: its gradient with
//! respect to the rendered image is `w(t)(ε̂ − ε)`, which seeds the render
//! backward pass directly. The other terms are ordinary scalars with
//! hand-written gradients.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::grad::GradAccumulator;
use crate::math::{Real, Vec3};
use crate::provider::{Conditioning, DiffusionSchedule, NoiseQuery, ProviderError, ScoreProvider};
use crate::render::{normal_at, normal_backward, DifferentiableField, ViewAdjoint, ViewRecord};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("score provider failed after {attempts} attempts: {last}")]
    Provider { attempts: usize, last: ProviderError },
    #[error("non-finite loss term `{0}`")]
    NonFinite(&'static str),
    #[error("map sizes differ: {0} vs {1}")]
    Shape(usize, usize),
    #[error("invalid SDS configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub sds: f64,
    pub depth: f64,
    pub entropy: f64,
    pub orientation: f64,
    pub smoothness: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { sds: 1.0, depth: 10.0, entropy: 0.01, orientation: 0.01, smoothness: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.sds, self.depth, self.entropy, self.orientation, self.smoothness];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err("loss weights must be finite and non-negative".into())
        }
    }
}

/// Unweighted per-term values of one step. `sds` is the noise residual
/// `mean((ε̂ − ε)²)`, reported for monitoring only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sds: f64,
    pub depth: f64,
    pub entropy: f64,
    pub orientation: f64,
    pub smoothness: f64,
}

/// One line of the training loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub sds: f64,
    pub depth: f64,
    pub entropy: f64,
    pub orientation: f64,
    pub smoothness: f64,
    pub total: f64,
    pub alpha_ws: f64,
    pub t: usize,
}

/// Weighted sum of the scalar terms. SDS enters the update through its
/// adjoint, not through this sum.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<f64, LossError> {
    let named = [
        ("sds", terms.sds),
        ("depth", terms.depth),
        ("entropy", terms.entropy),
        ("orientation", terms.orientation),
        ("smoothness", terms.smoothness),
    ];
    if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(LossError::NonFinite(name));
    }
    Ok(w.depth * terms.depth
        + w.entropy * terms.entropy
        + w.orientation * terms.orientation
        + w.smoothness * terms.smoothness)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdsConfig {
    /// Timesteps are drawn uniformly from `[t_min, t_max]·n_steps`.
    pub t_min: f64,
    pub t_max: f64,
    /// Constant `w(t)`.
    pub weight: f64,
    pub max_retries: usize,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self { t_min: 0.02, t_max: 0.98, weight: 1.0, max_retries: 3 }
    }
}

impl SdsConfig {
    pub fn timestep_range(&self, n_steps: usize) -> Result<(usize, usize), LossError> {
        if !(0.0 <= self.t_min && self.t_min <= self.t_max && self.t_max <= 1.0) {
            return Err(LossError::Config("need 0 <= t_min <= t_max <= 1".into()));
        }
        let lo = ((self.t_min * n_steps as f64).ceil() as usize).max(1);
        let hi = ((self.t_max * n_steps as f64).floor() as usize).min(n_steps);
        if lo > hi {
            return Err(LossError::Config("timestep range is empty".into()));
        }
        Ok((lo, hi))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdsOutput {
    /// `∂L/∂I`, same layout as the image.
    pub adjoint: Vec<f64>,
    pub t: usize,
    pub residual: f64,
    pub attempts: usize,
}

/// The SDS image gradient for a fixed `(t, ε)`.
pub fn sds_adjoint_at<P: ScoreProvider + ?Sized>(
    image: &[f64],
    shape: [usize; 3],
    t: usize,
    epsilon: &[f64],
    provider: &mut P,
    schedule: &DiffusionSchedule,
    cond: &Conditioning,
    weight: f64,
) -> Result<(Vec<f64>, f64), ProviderError> {
    let ab = schedule.alpha_bar(t)?;
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let noised: Vec<f64> = image.iter().zip(epsilon).map(|(x, e)| a * x + s * e).collect();
    let eps_hat = provider.predict_noise(&NoiseQuery { noised: &noised, shape, t, cond, epsilon })?;
    if eps_hat.len() != image.len() {
        return Err(ProviderError::ShapeMismatch { expected: shape.to_vec(), got: vec![eps_hat.len()] });
    }
    let mut residual = 0.0;
    let adjoint = eps_hat
        .iter()
        .zip(epsilon)
        .map(|(h, e)| {
            let d = h - e;
            residual += d * d;
            weight * d
        })
        .collect();
    Ok((adjoint, residual / image.len().max(1) as f64))
}

/// Draws `t` and `ε`, queries the provider, and retries with fresh draws on
/// failure.
pub fn sds_adjoint<P: ScoreProvider + ?Sized, R: Rng + ?Sized>(
    image: &[f64],
    shape: [usize; 3],
    provider: &mut P,
    schedule: &DiffusionSchedule,
    cond: &Conditioning,
    config: &SdsConfig,
    rng: &mut R,
) -> Result<SdsOutput, LossError> {
    let (lo, hi) = config.timestep_range(schedule.n_steps())?;
    let mut attempt = 0;
    loop {
        attempt += 1;
        let t = rng.random_range(lo..=hi);
        // f32-representable so the noise survives the wire format exactly.
        let eps: Vec<f64> = (0..image.len())
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                f64::from(e as f32)
            })
            .collect();
        match sds_adjoint_at(image, shape, t, &eps, provider, schedule, cond, config.weight) {
            Ok((adjoint, residual)) => return Ok(SdsOutput { adjoint, t, residual, attempts: attempt }),
            Err(e) if attempt > config.max_retries => return Err(LossError::Provider { attempts: attempt, last: e }),
            Err(_) => continue,
        }
    }
}

/// `1 − ρ(D, D̂)` with its gradient with respect to `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthLoss {
    pub loss: f64,
    pub degenerate: bool,
    pub grad: Vec<f64>,
    pub n_pixels: usize,
}

/// Pearson depth loss over the pixels where `select` holds.
pub fn depth_loss(rendered: &[f64], estimate: &[f64], select: &[bool]) -> Result<DepthLoss, LossError> {
    if rendered.len() != estimate.len() {
        return Err(LossError::Shape(rendered.len(), estimate.len()));
    }
    if rendered.len() != select.len() {
        return Err(LossError::Shape(rendered.len(), select.len()));
    }
    let mut out = DepthLoss { loss: 0.0, degenerate: true, grad: vec![0.0; rendered.len()], n_pixels: 0 };
    let idx: Vec<usize> = (0..rendered.len()).filter(|&i| select[i]).collect();
    let n = idx.len();
    out.n_pixels = n;
    if n < 2 {
        return Ok(out);
    }
    let nf = n as f64;
    let mx = idx.iter().map(|&i| rendered[i]).sum::<f64>() / nf;
    let my = idx.iter().map(|&i| estimate[i]).sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let (dx, dy) = (rendered[i] - mx, estimate[i] - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx / nf).sqrt() < 1e-6 || (syy / nf).sqrt() < 1e-6 {
        return Ok(out);
    }
    let norm = (sxx * syy).sqrt();
    let rho = sxy / norm;
    for &i in &idx {
        let d_rho = (estimate[i] - my) / norm - rho * (rendered[i] - mx) / sxx;
        out.grad[i] = -d_rho;
    }
    out.loss = 1.0 - rho;
    out.degenerate = false;
    Ok(out)
}

/// Zero-mean, unit-variance copy of a relative depth estimate, negated for
/// inverse-depth (disparity) inputs. Constant maps come back centered.
pub fn normalize_depth_estimate(values: &[f64], inverse: bool) -> Vec<f64> {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    let sign = if inverse { -1.0 } else { 1.0 };
    values.iter().map(|v| sign * (v - mean) * scale).collect()
}

pub const OPACITY_CLAMP: f64 = 1e-5;

/// Binary entropy of one clamped opacity.
pub fn binary_entropy(a: f64) -> f64 {
    let a = a.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
    -a * a.ln() - (1.0 - a) * (1.0 - a).ln()
}

/// Mean binary entropy of per-sample opacities and its gradient.
pub fn entropy_reg<S: Real>(opacity: &[S]) -> (S, Vec<S>) {
    if opacity.is_empty() {
        return (S::ZERO, Vec::new());
    }
    let n = S::from_f64(opacity.len() as f64);
    let (lo, hi) = (S::from_f64(OPACITY_CLAMP), S::from_f64(1.0 - OPACITY_CLAMP));
    let mut value = S::ZERO;
    let grad = opacity
        .iter()
        .map(|&a| {
            let c = a.clamp(lo, hi);
            value += -c * c.ln() - (S::ONE - c) * (S::ONE - c).ln();
            if a < lo || a > hi {
                S::ZERO
            } else {
                ((S::ONE - c) / c).ln() / n
            }
        })
        .collect();
    (value / n, grad)
}

/// `w·max(⟨n, d⟩, 0)²`
pub fn orientation_penalty<S: Real>(weight: S, normal: Vec3<S>, view_dir: Vec3<S>) -> S {
    let c = normal.dot(view_dir).max(S::ZERO);
    weight * c * c
}

/// Where a regularizer's gradient goes: rendering-weight and opacity
/// adjoints are collected for the render backward pass, while the
/// normal-dependent parts go straight into the parameter gradient.
pub struct RegularizerGrad<'a, S> {
    pub scale: S,
    pub adjoint: &'a mut ViewAdjoint<S>,
    pub grads: &'a mut GradAccumulator<S>,
}

/// Entropy over every sample of a recorded view.
pub fn entropy_over_record<S: Real>(record: &ViewRecord<S>, grad: Option<RegularizerGrad<'_, S>>) -> S {
    let mut opacity = Vec::with_capacity(record.n_samples());
    for i in 0..record.n_rays() {
        opacity.extend(record.ray_samples(i).opacity);
    }
    let (value, g) = entropy_reg(&opacity);
    if let Some(rg) = grad {
        let adj = &mut rg.adjoint.opacity;
        adj.resize(record.n_samples(), S::ZERO);
        for (a, gi) in adj.iter_mut().zip(&g) {
            *a += rg.scale * *gi;
        }
    }
    value
}

/// Mean over `rays` of `Σᵢ wᵢ·max(⟨nᵢ, d⟩, 0)²`, skipping samples with
/// weight below `min_weight` and degenerate normals.
pub fn orientation_over_record<S: Real, F: DifferentiableField<S> + ?Sized>(
    record: &ViewRecord<S>,
    rays: &[usize],
    field: &F,
    h: S,
    min_weight: S,
    mut grad: Option<RegularizerGrad<'_, S>>,
) -> S {
    if rays.is_empty() {
        return S::ZERO;
    }
    let inv_n = S::ONE / S::from_f64(rays.len() as f64);
    let mut scratch = F::Scratch::default();
    let mut total = S::ZERO;
    for &r in rays {
        let rs = record.ray_samples(r);
        let d = rs.ray.dir;
        for (j, &w) in rs.weight.iter().enumerate() {
            if w < min_weight || w == S::ZERO {
                continue;
            }
            let x = rs.ray.at(rs.t[j]);
            let n = normal_at(x, field, h);
            if n.degenerate {
                continue;
            }
            let c = n.n.dot(d);
            if c <= S::ZERO {
                continue;
            }
            total += w * c * c;
            if let Some(rg) = grad.as_mut() {
                let s = rg.scale * inv_n;
                let adj = &mut rg.adjoint.weight;
                adj.resize(record.n_samples(), S::ZERO);
                adj[rs.offset + j] += s * c * c;
                let g_n = d * (s * S::from_f64(2.0) * w * c);
                normal_backward(x, &n, g_n, h, field, &mut scratch, rg.grads);
            }
        }
    }
    total * inv_n
}

pub const SMOOTHNESS_PERTURBATION: f64 = 0.01;

/// Offsets uniform in `[−0.01, 0.01]³`.
pub fn smoothness_perturbations<S: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Vec3<S>> {
    let r = SMOOTHNESS_PERTURBATION;
    (0..n)
        .map(|_| {
            Vec3::new(
                S::from_f64(rng.random_range(-r..=r)),
                S::from_f64(rng.random_range(-r..=r)),
                S::from_f64(rng.random_range(-r..=r)),
            )
        })
        .collect()
}

/// Mean of `‖n(x) − n(x + δ)‖₁` over pairs with two well-defined normals.
pub fn smoothness_reg<S: Real, F: DifferentiableField<S> + ?Sized>(
    points: &[Vec3<S>],
    deltas: &[Vec3<S>],
    field: &F,
    h: S,
    mut grad: Option<RegularizerGrad<'_, S>>,
) -> S {
    let mut pairs = Vec::new();
    for (&x, &dx) in points.iter().zip(deltas) {
        let a = normal_at(x, field, h);
        let b = normal_at(x + dx, field, h);
        if !a.degenerate && !b.degenerate {
            pairs.push((x, dx, a, b));
        }
    }
    if pairs.is_empty() {
        return S::ZERO;
    }
    let inv_n = S::ONE / S::from_f64(pairs.len() as f64);
    let mut total = S::ZERO;
    let mut scratch = F::Scratch::default();
    for (x, dx, a, b) in &pairs {
        let diff = a.n - b.n;
        total += diff.l1();
        if let Some(rg) = grad.as_mut() {
            let sign = |v: S| {
                if v > S::ZERO {
                    S::ONE
                } else if v < S::ZERO {
                    -S::ONE
                } else {
                    S::ZERO
                }
            };
            let g = Vec3::new(sign(diff.x), sign(diff.y), sign(diff.z)) * (rg.scale * inv_n);
            normal_backward(*x, a, g, h, field, &mut scratch, rg.grads);
            normal_backward(*x + *dx, b, -g, h, field, &mut scratch, rg.grads);
        }
    }
    total * inv_n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{DiracProvider, EchoProvider};
    use crate::render::{FieldSample, VolumeField};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entropy_examples() {
        let (v, _) = entropy_reg(&[0.5f64; 4]);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let (v, _) = entropy_reg(&[0.0f64, 1.0, 0.0]);
        assert!(v < 2e-4);
        let (v, _) = entropy_reg(&[0.25f64]);
        let direct = -0.25 * 0.25f64.ln() - 0.75 * 0.75f64.ln();
        assert!((v - direct).abs() < 1e-12);
        assert!((v - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn entropy_is_concave_with_peak_at_half() {
        let h = 1e-4;
        for i in 1..99 {
            let a = i as f64 / 100.0;
            let second = (binary_entropy(a + h) - 2.0 * binary_entropy(a) + binary_entropy(a - h)) / (h * h);
            assert!(second < 0.0);
        }
        let (_, g) = entropy_reg(&[0.5f64]);
        assert!(g[0].abs() < 1e-12);
    }

    #[test]
    fn orientation_examples() {
        let d = Vec3::new(0.0, 0.0, -1.0);
        assert_eq!(orientation_penalty(1.0, -d, d), 0.0);
        assert_eq!(orientation_penalty(1.0, d, d), 1.0);
        assert_eq!(orientation_penalty(1.0, Vec3::new(1.0, 0.0, 0.0), d), 0.0);
    }

    #[test]
    fn depth_loss_examples() {
        let d: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin() + 2.0).collect();
        let sel = vec![true; 10];
        let affine: Vec<f64> = d.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!(depth_loss(&d, &affine, &sel).unwrap().loss.abs() < 1e-12);
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        assert!((depth_loss(&d, &neg, &sel).unwrap().loss - 2.0).abs() < 1e-12);
        let flat = depth_loss(&d, &[4.0; 10], &sel).unwrap();
        assert!(flat.degenerate && flat.loss == 0.0);
        let mut one = vec![false; 10];
        one[3] = true;
        assert!(depth_loss(&d, &affine, &one).unwrap().degenerate);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossTerms::default(), &w).unwrap(), 0.0);
        let t = LossTerms { depth: 0.2, ..Default::default() };
        assert!((total_loss(&t, &w).unwrap() - 2.0).abs() < 1e-12);
        let t = LossTerms { entropy: 0.3, ..Default::default() };
        let doubled = LossWeights { entropy: 0.02, ..w.clone() };
        assert!((total_loss(&t, &doubled).unwrap() - 2.0 * total_loss(&t, &w).unwrap()).abs() < 1e-15);
        let t = LossTerms { smoothness: f64::NAN, ..Default::default() };
        assert_eq!(total_loss(&t, &w), Err(LossError::NonFinite("smoothness")));
    }

    #[test]
    fn sds_fixed_points() {
        let schedule = DiffusionSchedule::default();
        let target = vec![0.2, 0.4, 0.6];
        let cond = Conditioning { cond_id: "c".into(), view: None };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SdsConfig::default();
        let mut dirac = DiracProvider::new(target.clone(), [1, 1, 3], schedule.clone()).unwrap();
        let out = sds_adjoint(&target, [1, 1, 3], &mut dirac, &schedule, &cond, &cfg, &mut rng).unwrap();
        assert!(out.adjoint.iter().all(|v| v.abs() < 1e-12));
        let out =
            sds_adjoint(&[0.9, 0.1, 0.0], [1, 1, 3], &mut EchoProvider, &schedule, &cond, &cfg, &mut rng).unwrap();
        assert!(out.adjoint.iter().all(|&v| v == 0.0));
        assert!((20..=980).contains(&out.t));
    }

    struct Flaky {
        failures: usize,
    }

    impl ScoreProvider for Flaky {
        fn capabilities(&self) -> crate::provider::Capabilities {
            EchoProvider.capabilities()
        }
        fn predict_noise(&mut self, q: &NoiseQuery<'_>) -> Result<Vec<f64>, ProviderError> {
            if self.failures > 0 {
                self.failures -= 1;
                return Err(ProviderError::Timeout("slow".into()));
            }
            EchoProvider.predict_noise(q)
        }
    }

    #[test]
    fn sds_retries_three_times() {
        let schedule = DiffusionSchedule::default();
        let cond = Conditioning { cond_id: "c".into(), view: None };
        let cfg = SdsConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out =
            sds_adjoint(&[0.5; 3], [1, 1, 3], &mut Flaky { failures: 3 }, &schedule, &cond, &cfg, &mut rng).unwrap();
        assert_eq!(out.attempts, 4);
        let err = sds_adjoint(&[0.5; 3], [1, 1, 3], &mut Flaky { failures: 4 }, &schedule, &cond, &cfg, &mut rng);
        assert!(matches!(err, Err(LossError::Provider { attempts: 4, .. })));
    }

    struct LinearZ;
    impl VolumeField<f64> for LinearZ {
        fn sample(&self, x: Vec3<f64>, _c: bool) -> FieldSample<f64> {
            FieldSample { sigma: 2.0 + 0.5 * x.z, color: [0.0; 3] }
        }
    }
    impl DifferentiableField<f64> for LinearZ {
        type Scratch = ();
        fn backward(&self, _: Vec3<f64>, _: f64, _: Option<[f64; 3]>, _: &mut (), _: &mut GradAccumulator<f64>) {}
    }

    /// A unit sphere with a bumpy surface whose bump amplitude is what a
    /// Gaussian blur of width `blur` leaves of the unblurred bumps.
    struct BumpySphere {
        blur: f64,
    }
    impl VolumeField<f64> for BumpySphere {
        fn sample(&self, x: Vec3<f64>, _c: bool) -> FieldSample<f64> {
            let k: f64 = 20.0;
            let amp = 0.05 * (-3.0 * k * k * self.blur * self.blur / 2.0).exp();
            let bump = amp * (k * x.x).sin() * (k * x.y).sin() * (k * x.z).sin();
            let s = x.norm() - 1.0 + bump;
            FieldSample { sigma: 10.0 / (1.0 + (s / 0.05).exp()), color: [0.0; 3] }
        }
    }
    impl DifferentiableField<f64> for BumpySphere {
        type Scratch = ();
        fn backward(&self, _: Vec3<f64>, _: f64, _: Option<[f64; 3]>, _: &mut (), _: &mut GradAccumulator<f64>) {}
    }

    #[test]
    fn smoothness_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3<f64>> = (0..20).map(|i| Vec3::new(0.1 * i as f64 - 1.0, 0.3, -0.2)).collect();
        let deltas = smoothness_perturbations(pts.len(), &mut rng);
        assert!(smoothness_reg(&pts, &deltas, &LinearZ, 1e-3, None) < 1e-9);
        let zero = vec![Vec3::zero(); pts.len()];
        let sphere = BumpySphere { blur: 0.0 };
        assert_eq!(smoothness_reg(&pts, &zero, &sphere, 1e-3, None), 0.0);

        let surface: Vec<Vec3<f64>> = (0..200)
            .map(|_| {
                let v =
                    Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                v.normalized()
            })
            .collect();
        let deltas = smoothness_perturbations(surface.len(), &mut rng);
        let sharp = smoothness_reg(&surface, &deltas, &BumpySphere { blur: 0.01 }, 1e-3, None);
        let smooth = smoothness_reg(&surface, &deltas, &BumpySphere { blur: 0.04 }, 1e-3, None);
        assert!(smooth < sharp, "{smooth} !< {sharp}");
    }
}

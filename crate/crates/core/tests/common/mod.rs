//! Central-difference gradient checks shared by the gradient and
//! acceptance suites. Everything runs in `f64` on small random instances.

#![allow(dead_code)]

use conrad::constraint::{ConstrainedField, Constraint, ReferenceConditioning, VisibilityDepthMap};
use conrad::field::{FieldConfig, HashGridConfig, MlpConfig, RadianceField};
use conrad::grad::{GradAccumulator, ParamStore};
use conrad::imaging::{RgbImage, ScalarMap};
use conrad::math::Vec3;
use conrad::objectives::{
    depth_loss, entropy_over_record, orientation_over_record, smoothness_perturbations, smoothness_reg, RegularizerGrad,
};
use conrad::render::{render_recorded, MarchConfig, RayBounds, ViewAdjoint, ViewRecord};
use conrad::scene::{generate_rays, CameraIntrinsics, CameraPose, RayBundle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const MAX_REL_ERROR: f64 = 1e-4;

/// Two dense and one hashed level, narrow MLPs.
pub fn small_field() -> RadianceField {
    RadianceField::new(FieldConfig {
        grid: HashGridConfig {
            n_levels: 3,
            table_size_log2: 9,
            base_resolution: 4,
            finest_resolution: 24,
            ..Default::default()
        },
        density_mlp: MlpConfig { n_layers: 2, hidden_dim: 8 },
        color_mlp: MlpConfig { n_layers: 2, hidden_dim: 8 },
        ..Default::default()
    })
    .unwrap()
}

/// Default initialization with hash features widened so the encoding
/// actually varies over space.
pub fn random_params(field: &RadianceField, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut p: ParamStore<f64> = field.init_params(rng);
    for i in field.hash_range() {
        p.values[i] = rng.random_range(-0.5..0.5);
    }
    p
}

pub fn march() -> MarchConfig {
    MarchConfig { n_samples: 16, bounds: RayBounds::Sphere { radius: 1.5 }, perturb: true, ..Default::default() }
}

fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
    CameraPose::from_degrees(rng.random_range(-60.0..60.0), rng.random_range(-20.0..20.0), rng.random_range(2.8..3.4))
        .unwrap()
}

pub fn small_view(rng: &mut ChaCha8Rng, size: usize) -> RayBundle {
    let mut intr = CameraIntrinsics::square(size);
    intr.vertical_fov = 30f64.to_radians();
    generate_rays(&random_pose(rng), &intr)
}

/// Random reference image, soft mask and visibility map for constraint
/// checks with everything but the field frozen.
pub fn random_conditioning(rng: &mut ChaCha8Rng, size: usize) -> (ReferenceConditioning, VisibilityDepthMap) {
    let n = size * size;
    let image = RgbImage::new(size, size, (0..3 * n).map(|_| rng.random::<f32>()).collect()).unwrap();
    let mask = ScalarMap::new(size, size, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap();
    let cond = ReferenceConditioning::new(image, mask, None, CameraPose::reference(), "check").unwrap();
    let vis = VisibilityDepthMap {
        width: size,
        height: size,
        depth: (0..n).map(|_| rng.random_range(2.2..4.2)).collect(),
        valid: vec![true; n],
    };
    (cond, vis)
}

/// Indices worth checking: the largest analytic entries plus random
/// touched and untouched ones.
pub fn pick_indices(grad: &[f64], rng: &mut ChaCha8Rng, n_top: usize, n_random: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grad.len()).collect();
    order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
    let mut out: Vec<usize> = order[..n_top.min(order.len())].to_vec();
    let touched: Vec<usize> = order.iter().copied().filter(|&i| grad[i] != 0.0).collect();
    for _ in 0..n_random {
        if !touched.is_empty() {
            out.push(touched[rng.random_range(0..touched.len())]);
        }
        out.push(rng.random_range(0..grad.len()));
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Largest `|g − g_fd| / max(|g|, |g_fd|, floor)` over `indices`, with
/// `floor = 1e-6 · max|g|` so entries at roundoff level do not count.
///
/// An index whose ±h interval straddles a kink (ReLU, `|·|`, `max(·, 0)`)
/// shows up as disagreeing one-sided differences; such indices are skipped,
/// but at most a quarter of them.
pub fn max_relative_error(
    params: &ParamStore<f64>,
    analytic: &[f64],
    indices: &[usize],
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-6 * scale).max(1e-12);
    let center = loss(params);
    let mut worst = 0.0f64;
    let mut skipped = 0;
    let mut p = params.clone();
    for &i in indices {
        let v = p.values[i];
        p.values[i] = v + FD_STEP;
        let up = loss(&p);
        p.values[i] = v - FD_STEP;
        let down = loss(&p);
        p.values[i] = v;
        let (fwd, bwd) = ((up - center) / FD_STEP, (center - down) / FD_STEP);
        if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(floor) {
            skipped += 1;
            continue;
        }
        let fd = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(floor));
    }
    assert!(4 * skipped <= indices.len(), "{skipped} of {} indices sit on kinks", indices.len());
    worst
}

/// Random linear functional over every render output, including the
/// per-sample opacities and weights.
struct Probe {
    color: Vec<[f64; 3]>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
    opacity: Vec<f64>,
    weight: Vec<f64>,
}

impl Probe {
    fn new(rng: &mut ChaCha8Rng, n_rays: usize, n_samples: usize) -> Self {
        let mut r = || rng.random_range(-1.0..1.0);
        Self {
            color: (0..n_rays).map(|_| [r(), r(), r()]).collect(),
            depth: (0..n_rays).map(|_| r()).collect(),
            alpha: (0..n_rays).map(|_| r()).collect(),
            opacity: (0..n_samples).map(|_| r()).collect(),
            weight: (0..n_samples).map(|_| r()).collect(),
        }
    }

    fn value(&self, rec: &ViewRecord<f64>) -> f64 {
        let v = &rec.view;
        let mut total = 0.0;
        for i in 0..rec.n_rays() {
            total += (0..3).map(|k| self.color[i][k] * v.color[i][k]).sum::<f64>();
            total += self.depth[i] * v.depth[i] + self.alpha[i] * v.alpha[i];
            let rs = rec.ray_samples(i);
            for j in 0..rs.weight.len() {
                total += self.opacity[rs.offset + j] * rs.opacity[j] + self.weight[rs.offset + j] * rs.weight[j];
            }
        }
        total
    }

    fn adjoint(&self) -> ViewAdjoint<f64> {
        ViewAdjoint {
            color: self.color.clone(),
            depth: self.depth.clone(),
            alpha: self.alpha.clone(),
            opacity: self.opacity.clone(),
            weight: self.weight.clone(),
        }
    }
}

fn record(
    field: &RadianceField,
    params: &ParamStore<f64>,
    constraint: Option<Constraint<'_>>,
    bundle: &RayBundle,
    seed: u64,
) -> ViewRecord<f64> {
    let cf = ConstrainedField::new(field, params, constraint);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render_recorded(bundle, &cf, &march(), Some(&mut rng), true).unwrap()
}

/// Renderer outputs, optionally seen through a frozen constraint.
pub fn check_render(seed: u64, constrained: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = small_field();
    let params = random_params(&field, &mut rng);
    let bundle = small_view(&mut rng, 3);
    let (cond, vis) = random_conditioning(&mut rng, 5);
    let alpha = rng.random_range(0.3..0.9);
    let constraint = || constrained.then(|| Constraint::new(&cond, Some(&vis), alpha));
    let jitter = rng.random();
    let rec = record(&field, &params, constraint(), &bundle, jitter);
    let probe = Probe::new(&mut rng, rec.n_rays(), rec.n_samples());
    let mut grads = GradAccumulator::new(field.n_params());
    let cf = ConstrainedField::new(&field, &params, constraint());
    rec.backward(&cf, &probe.adjoint(), &mut grads).unwrap();
    let idx = pick_indices(&grads.grads, &mut rng, 25, 25);
    max_relative_error(&params, &grads.grads, &idx, |p| probe.value(&record(&field, p, constraint(), &bundle, jitter)))
}

pub fn check_depth_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = small_field();
    let params = random_params(&field, &mut rng);
    let bundle = small_view(&mut rng, 4);
    let estimate: Vec<f64> = (0..bundle.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let select: Vec<bool> = (0..bundle.len()).map(|_| rng.random_bool(0.8)).collect();
    let jitter = rng.random();
    let loss = |p: &ParamStore<f64>| -> (f64, Vec<f64>, ViewRecord<f64>) {
        let rec = record(&field, p, None, &bundle, jitter);
        let dl = depth_loss(&rec.view.depth, &estimate, &select).unwrap();
        assert!(!dl.degenerate);
        (dl.loss, dl.grad, rec)
    };
    let (_, g_depth, rec) = loss(&params);
    let mut grads = GradAccumulator::new(field.n_params());
    let adj = ViewAdjoint { depth: g_depth, ..Default::default() };
    rec.backward(&ConstrainedField::unconstrained(&field, &params), &adj, &mut grads).unwrap();
    let idx = pick_indices(&grads.grads, &mut rng, 25, 25);
    max_relative_error(&params, &grads.grads, &idx, |p| loss(p).0)
}

#[derive(Clone, Copy, Debug)]
pub enum Regularizer {
    Entropy,
    Orientation,
    Smoothness,
}

pub fn check_regularizer(seed: u64, which: Regularizer) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = small_field();
    let params = random_params(&field, &mut rng);
    let bundle = small_view(&mut rng, 3);
    let jitter = rng.random();
    let h = 1e-3;
    let rays: Vec<usize> = (0..bundle.len()).collect();
    let points: Vec<Vec3<f64>> = (0..12)
        .map(|_| Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)))
        .collect();
    let deltas = smoothness_perturbations::<f64, _>(points.len(), &mut rng);
    let eval = |p: &ParamStore<f64>, grads: Option<&mut GradAccumulator<f64>>| -> f64 {
        let rec = record(&field, p, None, &bundle, jitter);
        let cf = ConstrainedField::unconstrained(&field, p);
        let mut adjoint = ViewAdjoint::default();
        let mut scratch_grads = GradAccumulator::new(field.n_params());
        let g = grads.unwrap_or(&mut scratch_grads);
        let rg = RegularizerGrad { scale: 1.0, adjoint: &mut adjoint, grads: g };
        let v = match which {
            Regularizer::Entropy => entropy_over_record(&rec, Some(rg)),
            Regularizer::Orientation => orientation_over_record(&rec, &rays, &cf, h, 0.0, Some(rg)),
            Regularizer::Smoothness => smoothness_reg(&points, &deltas, &cf, h, Some(rg)),
        };
        rec.backward(&cf, &adjoint, g).unwrap();
        v
    };
    let mut grads = GradAccumulator::new(field.n_params());
    let value = eval(&params, Some(&mut grads));
    assert!(value > 0.0, "{which:?} is identically zero on this instance");
    let idx = pick_indices(&grads.grads, &mut rng, 25, 25);
    max_relative_error(&params, &grads.grads, &idx, |p| eval(p, None))
}

/// Every check over `seeds`; returns `(name, worst relative error)`.
pub fn gradient_suite(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64)> {
    let worst = |f: &dyn Fn(u64) -> f64| seeds.clone().map(f).fold(0.0f64, f64::max);
    vec![
        ("renderer", worst(&|s| check_render(s, false))),
        ("constrained renderer", worst(&|s| check_render(s, true))),
        ("depth loss", worst(&check_depth_loss)),
        ("entropy", worst(&|s| check_regularizer(s, Regularizer::Entropy))),
        ("orientation", worst(&|s| check_regularizer(s, Regularizer::Orientation))),
        ("smoothness", worst(&|s| check_regularizer(s, Regularizer::Smoothness))),
    ]
}

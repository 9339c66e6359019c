//! The optimization loop.
//!
//! Each step, in order:
//! 1. compute the warm-start factor `α`;
//! 2. march the constrained density along the precomputed reference rays,
//!    reading off the visibility depth map and the reference depth;
//! 3. apply the Pearson depth loss against the estimate (if any);
//! 4. render a random view through the constrained field;
//! 5. query the score provider for the SDS image gradient;
//! 6. add the entropy, orientation and smoothness regularizers;
//! 7. backpropagate and take one optimizer step.
//!
//! All randomness of step `k` comes from a ChaCha stream keyed by
//! `(seed, k)`, so a resumed run continues bit-for-bit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::constraint::{
    visibility_from_record, warm_alpha, ConstrainedField, Constraint, ConstraintError, ReferenceConditioning,
    VisibilityDepthMap, WarmStartSchedule,
};
use crate::field::{FieldConfig, FieldError, HashGridConfig, MlpConfig, RadianceField};
use crate::grad::{GradAccumulator, ParamStore};
use crate::imaging::{ImageError, RgbImage, ScalarMap};
use crate::math::Vec3;
use crate::objectives::{
    depth_loss, entropy_over_record, normalize_depth_estimate, orientation_over_record, sds_adjoint,
    smoothness_perturbations, smoothness_reg, total_loss, LossError, LossReport, LossTerms, LossWeights,
    RegularizerGrad, SdsConfig,
};
use crate::optim::{optimizer_step, OptimError, OptimizerConfig, OptimizerKind, OptimizerState};
use crate::provider::{Conditioning, DiffusionSchedule, ProviderError, ScheduleConfig, ScoreProvider};
use crate::render::{render_recorded, render_view, MarchConfig, RenderError, RenderedView, ViewAdjoint};
use crate::scene::{
    generate_rays, sample_random_pose, CameraIntrinsics, CameraPose, PoseBounds, RayBundle, SceneError,
    REFERENCE_RADIUS,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("step {step}: {source}")]
    Loss { step: u64, source: LossError },
    #[error("step {step}: {source}")]
    Optimizer { step: u64, source: OptimError },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// The provider error behind a failed step, if that is what failed.
    pub fn provider_error(&self) -> Option<&ProviderError> {
        match self {
            Self::Loss { source: LossError::Provider { last, .. }, .. } => Some(last),
            _ => None,
        }
    }
}

/// Training configuration; its JSON form rejects unknown keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub optimizer_betas: [f64; 3],
    pub optimizer_eps: f64,
    pub loss_weights: LossWeights,
    pub pose_bounds: PoseBounds,
    /// Side of the square training renders, in pixels.
    pub resolution: usize,
    pub seed: u64,
    pub eta: f64,
    /// Fraction of `total_steps` over which the constraints ramp in.
    pub warm_start_fraction: f64,
    pub field: FieldConfig,
    pub march: MarchConfig,
    pub sds: SdsConfig,
    pub schedule: ScheduleConfig,
    /// Rays per view used by the orientation and smoothness terms; 0 uses
    /// every ray.
    pub regularizer_rays: usize,
    /// Samples lighter than this are skipped by the orientation term.
    pub orientation_min_weight: f64,
    pub normal_step: f64,
    /// The depth estimate is inverse depth (disparity) and gets negated.
    pub inverse_depth: bool,
    /// Random views per step; gradients are averaged.
    pub poses_per_step: usize,
    pub checkpoint_every: u64,
    pub preview_every: u64,
    pub preview_resolution: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        Self {
            total_steps: 5000,
            learning_rate: opt.learning_rate,
            weight_decay: opt.weight_decay,
            optimizer: opt.kind,
            optimizer_betas: opt.betas,
            optimizer_eps: opt.eps,
            loss_weights: LossWeights::default(),
            pose_bounds: PoseBounds::default(),
            resolution: 64,
            seed: 0,
            eta: 0.1,
            warm_start_fraction: 0.5,
            field: FieldConfig::default(),
            march: MarchConfig { perturb: true, ..MarchConfig::default() },
            sds: SdsConfig::default(),
            schedule: ScheduleConfig::default(),
            regularizer_rays: 256,
            orientation_min_weight: 1e-4,
            normal_step: 1e-3,
            inverse_depth: false,
            poses_per_step: 1,
            checkpoint_every: 500,
            preview_every: 500,
            preview_resolution: 64,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// A small field and sampler sized for 64×64 toy scenes on one core.
    pub fn toy(total_steps: u64) -> Self {
        let field = FieldConfig {
            grid: HashGridConfig { n_levels: 6, table_size_log2: 14, finest_resolution: 64, ..Default::default() },
            density_mlp: MlpConfig { n_layers: 2, hidden_dim: 32 },
            color_mlp: MlpConfig { n_layers: 2, hidden_dim: 32 },
            ..Default::default()
        };
        let march = MarchConfig { n_samples: 32, perturb: true, min_transmittance: 1e-4, ..Default::default() };
        Self { total_steps, field, march, regularizer_rays: 128, ..Self::default() }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            betas: self.optimizer_betas,
            eps: self.optimizer_eps,
        }
    }

    pub fn warm_start(&self) -> WarmStartSchedule {
        WarmStartSchedule { total_steps: self.total_steps, plateau_fraction: self.warm_start_fraction }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.total_steps == 0 {
            return err("total_steps must be positive".into());
        }
        if self.resolution == 0 || self.preview_resolution == 0 {
            return err("resolutions must be positive".into());
        }
        if self.poses_per_step == 0 {
            return err("poses_per_step must be positive".into());
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return err(format!("eta must be in (0, 1), got {}", self.eta));
        }
        if !(self.normal_step > 0.0) {
            return err("normal_step must be positive".into());
        }
        self.optimizer_config().validate().map_err(TrainError::Config)?;
        self.loss_weights.validate().map_err(TrainError::Config)?;
        self.warm_start().validate()?;
        self.pose_bounds.validate()?;
        self.march.validate()?;
        self.sds.timestep_range(self.schedule.n_steps).map_err(|e| TrainError::Config(e.to_string()))?;
        DiffusionSchedule::new(self.schedule.clone()).map_err(|e| TrainError::Config(e.to_string()))?;
        RadianceField::new(self.field.clone())?;
        Ok(())
    }
}

/// Bounds used when rendering reference rays and previews.
fn eval_march(config: &MarchConfig) -> MarchConfig {
    MarchConfig { perturb: false, ..config.clone() }
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Stream 0 initializes the parameters; step k uses stream k + 1.
    rng.set_stream(step + 1);
    rng
}

pub struct Trainer<'a> {
    pub conditioning: &'a ReferenceConditioning,
    config: TrainConfig,
    field: RadianceField,
    params: ParamStore<f32>,
    optimizer: OptimizerState,
    step: u64,
    provider: &'a mut dyn ScoreProvider,
    schedule: DiffusionSchedule,
    reference_rays: RayBundle,
    depth_estimate: Option<Vec<f64>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        conditioning: &'a ReferenceConditioning,
        config: TrainConfig,
        provider: &'a mut dyn ScoreProvider,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let field = RadianceField::new(config.field.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = field.init_params(&mut rng);
        let optimizer = OptimizerState::new(config.optimizer, field.n_params());
        Self::assemble(conditioning, config, provider, field, params, optimizer, 0)
    }

    /// Continues from a checkpoint; its configuration replaces any other.
    pub fn resume(
        conditioning: &'a ReferenceConditioning,
        checkpoint: Checkpoint,
        provider: &'a mut dyn ScoreProvider,
    ) -> Result<Self, TrainError> {
        let Checkpoint { config, step, params, optimizer } = checkpoint;
        config.validate()?;
        let field = RadianceField::new(config.field.clone())?;
        let params =
            ParamStore::from_values(field.layout().clone(), params).map_err(|e| TrainError::Config(e.to_string()))?;
        if optimizer.kind != config.optimizer {
            return Err(TrainError::Config("checkpoint optimizer state does not match its config".into()));
        }
        Self::assemble(conditioning, config, provider, field, params, optimizer, step)
    }

    fn assemble(
        conditioning: &'a ReferenceConditioning,
        config: TrainConfig,
        provider: &'a mut dyn ScoreProvider,
        field: RadianceField,
        params: ParamStore<f32>,
        optimizer: OptimizerState,
        step: u64,
    ) -> Result<Self, TrainError> {
        let schedule =
            DiffusionSchedule::new(config.schedule.clone()).map_err(|e| TrainError::Config(e.to_string()))?;
        let depth_estimate = conditioning.depth.as_ref().map(|d| {
            let raw: Vec<f64> = d.data.iter().map(|&v| v as f64).collect();
            normalize_depth_estimate(&raw, config.inverse_depth)
        });
        Ok(Self {
            conditioning,
            reference_rays: conditioning.rays(),
            config,
            field,
            params,
            optimizer,
            step,
            provider,
            schedule,
            depth_estimate,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn field(&self) -> &RadianceField {
        &self.field
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    /// Number of completed updates.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.params.values.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Warm-start factor of the next update.
    pub fn alpha(&self) -> Result<f64, TrainError> {
        Ok(warm_alpha(self.step.min(self.config.total_steps), &self.config.warm_start())?)
    }

    /// Visibility depth of the current field at constraint strength `alpha`.
    pub fn visibility(&self, alpha: f64) -> Result<VisibilityDepthMap, TrainError> {
        visibility_map(&self.field, &self.params, self.conditioning, &self.reference_rays, &self.config, alpha)
    }

    /// Deterministic render through the constraint at strength `alpha`.
    pub fn render(
        &self,
        pose: &CameraPose,
        intrinsics: &CameraIntrinsics,
        alpha: f64,
    ) -> Result<RenderedView<f32>, TrainError> {
        let mut views = render_constrained(
            &self.field,
            &self.params,
            self.conditioning,
            &self.config,
            &[*pose],
            intrinsics,
            alpha,
        )?;
        Ok(views.pop().expect("one pose"))
    }

    /// Runs one update and returns its loss record.
    pub fn train_step(&mut self) -> Result<LossReport, TrainError> {
        if self.is_done() {
            return Err(TrainError::Config(format!("already ran all {} steps", self.config.total_steps)));
        }
        let step = self.step;
        let cfg = &self.config;
        let w = &cfg.loss_weights;
        let alpha = warm_alpha(step, &cfg.warm_start())?;
        let mut rng = step_rng(cfg.seed, step);
        let mut grads = GradAccumulator::<f32>::new(self.field.n_params());
        let mut terms = LossTerms::default();
        let loss_err = |source| TrainError::Loss { step, source };

        // Reference rays: visibility depth and rendered depth from one pass.
        let ref_march = eval_march(&cfg.march);
        let density_only =
            ConstrainedField::new(&self.field, &self.params, Some(Constraint::new(self.conditioning, None, alpha)));
        let ref_record =
            render_recorded::<f32, _, ChaCha8Rng>(&self.reference_rays, &density_only, &ref_march, None, false)?;
        let vis = visibility_from_record(&ref_record, &self.reference_rays, &ref_march, cfg.eta)?;

        if let (Some(estimate), true) = (&self.depth_estimate, w.depth > 0.0) {
            let mask = &self.conditioning.mask.data;
            let select: Vec<bool> = (0..mask.len()).map(|i| mask[i] >= 0.5 && vis.valid[i]).collect();
            let rendered: Vec<f64> = ref_record.view.depth.iter().map(|&d| d as f64).collect();
            let dl = depth_loss(&rendered, estimate, &select).map_err(loss_err)?;
            terms.depth = dl.loss;
            if !dl.degenerate {
                let adjoint =
                    ViewAdjoint { depth: dl.grad.iter().map(|g| (w.depth * g) as f32).collect(), ..Default::default() };
                ref_record.backward(&density_only, &adjoint, &mut grads)?;
            }
        }

        let constraint = Constraint::new(self.conditioning, Some(&vis), alpha);
        let cf = ConstrainedField::new(&self.field, &self.params, Some(constraint));
        let intr = CameraIntrinsics::square(cfg.resolution);
        let k = cfg.poses_per_step;
        let inv_k = 1.0 / k as f64;
        let h = cfg.normal_step as f32;
        let mut t_report = 0;
        for _ in 0..k {
            let pose = sample_random_pose(&mut rng, &cfg.pose_bounds)?;
            let bundle = generate_rays(&pose, &intr);
            let record = render_recorded(&bundle, &cf, &cfg.march, Some(&mut rng), true)?;
            let mut adjoint = ViewAdjoint::<f32>::default();

            if w.sds > 0.0 {
                let image: Vec<f64> = record.view.color.iter().flat_map(|c| c.map(f64::from)).collect();
                let cond = Conditioning { cond_id: self.conditioning.cond_id.clone(), view: Some(pose) };
                let shape = [intr.height, intr.width, 3];
                let sds = sds_adjoint(&image, shape, &mut *self.provider, &self.schedule, &cond, &cfg.sds, &mut rng)
                    .map_err(loss_err)?;
                let s = w.sds * inv_k;
                adjoint.color =
                    sds.adjoint.chunks_exact(3).map(|c| [c[0], c[1], c[2]].map(|v| (s * v) as f32)).collect();
                terms.sds += sds.residual * inv_k;
                t_report = sds.t;
            }

            if w.entropy > 0.0 {
                let rg =
                    RegularizerGrad { scale: (w.entropy * inv_k) as f32, adjoint: &mut adjoint, grads: &mut grads };
                terms.entropy += entropy_over_record(&record, Some(rg)) as f64 * inv_k;
            }

            let n_rays = record.n_rays();
            let subset: Vec<usize> = if cfg.regularizer_rays == 0 || cfg.regularizer_rays >= n_rays {
                (0..n_rays).collect()
            } else {
                let mut s = sample_indices(&mut rng, n_rays, cfg.regularizer_rays).into_vec();
                s.sort_unstable();
                s
            };
            if w.orientation > 0.0 {
                let rg =
                    RegularizerGrad { scale: (w.orientation * inv_k) as f32, adjoint: &mut adjoint, grads: &mut grads };
                let v = orientation_over_record(&record, &subset, &cf, h, cfg.orientation_min_weight as f32, Some(rg));
                terms.orientation += v as f64 * inv_k;
            }
            if w.smoothness > 0.0 {
                let points: Vec<Vec3<f32>> = subset
                    .iter()
                    .filter(|&&r| record.view.alpha[r] >= 0.5)
                    .map(|&r| {
                        let rs = record.ray_samples(r);
                        let j = (0..rs.weight.len())
                            .max_by(|&a, &b| rs.weight[a].total_cmp(&rs.weight[b]))
                            .expect("alpha > 0 implies samples");
                        record.point(r, j)
                    })
                    .collect();
                let deltas = smoothness_perturbations::<f32, _>(points.len(), &mut rng);
                let rg =
                    RegularizerGrad { scale: (w.smoothness * inv_k) as f32, adjoint: &mut adjoint, grads: &mut grads };
                terms.smoothness += smoothness_reg(&points, &deltas, &cf, h, Some(rg)) as f64 * inv_k;
            }
            record.backward(&cf, &adjoint, &mut grads)?;
        }

        let total = total_loss(&terms, w).map_err(loss_err)?;
        optimizer_step(&mut self.params.values, &grads.grads, &mut self.optimizer, &cfg.optimizer_config())
            .map_err(|source| TrainError::Optimizer { step, source })?;
        self.step += 1;
        Ok(LossReport {
            step,
            sds: terms.sds,
            depth: terms.depth,
            entropy: terms.entropy,
            orientation: terms.orientation,
            smoothness: terms.smoothness,
            total,
            alpha_ws: alpha,
            t: t_report,
        })
    }
}

/// Visibility depth over the reference rays for arbitrary parameters.
pub fn visibility_map(
    field: &RadianceField,
    params: &ParamStore<f32>,
    conditioning: &ReferenceConditioning,
    reference_rays: &RayBundle,
    config: &TrainConfig,
    alpha: f64,
) -> Result<VisibilityDepthMap, TrainError> {
    let march = eval_march(&config.march);
    let cf = ConstrainedField::new(field, params, Some(Constraint::new(conditioning, None, alpha)));
    let record = render_recorded::<f32, _, ChaCha8Rng>(reference_rays, &cf, &march, None, false)?;
    Ok(visibility_from_record(&record, reference_rays, &march, config.eta)?)
}

/// Field and parameters stored in a checkpoint.
pub fn model_from_checkpoint(checkpoint: &Checkpoint) -> Result<(RadianceField, ParamStore<f32>), TrainError> {
    let field = RadianceField::new(checkpoint.config.field.clone())?;
    let params = ParamStore::from_values(field.layout().clone(), checkpoint.params.clone())
        .map_err(|e| TrainError::Config(e.to_string()))?;
    Ok((field, params))
}

/// Deterministic renders of `poses` through the constraint at strength
/// `alpha`, sharing one visibility-depth pass.
pub fn render_constrained(
    field: &RadianceField,
    params: &ParamStore<f32>,
    conditioning: &ReferenceConditioning,
    config: &TrainConfig,
    poses: &[CameraPose],
    intrinsics: &CameraIntrinsics,
    alpha: f64,
) -> Result<Vec<RenderedView<f32>>, TrainError> {
    let vis = visibility_map(field, params, conditioning, &conditioning.rays(), config, alpha)?;
    let cf = ConstrainedField::new(field, params, Some(Constraint::new(conditioning, Some(&vis), alpha)));
    let march = eval_march(&config.march);
    poses.iter().map(|pose| Ok(render_view(pose, intrinsics, &cf, &march)?)).collect()
}

/// Cameras shown next to the reference view in previews.
pub fn preview_poses() -> [CameraPose; 3] {
    [90.0, 180.0, 270.0].map(|az| CameraPose::from_degrees(az, 15.0, REFERENCE_RADIUS).expect("valid pose"))
}

/// Reference view plus three novel views, side by side.
pub fn preview_strip(trainer: &Trainer<'_>, size: usize) -> Result<RgbImage, TrainError> {
    let intr = CameraIntrinsics::square(size);
    let mut poses = vec![trainer.conditioning.pose];
    poses.extend(preview_poses());
    let views = render_constrained(
        trainer.field(),
        trainer.params(),
        trainer.conditioning,
        trainer.config(),
        &poses,
        &intr,
        1.0,
    )?;
    let mut strip = RgbImage::filled(size * poses.len(), size, [1.0; 3]);
    for (k, view) in views.iter().enumerate() {
        for r in 0..size {
            for c in 0..size {
                strip.set_pixel(r, k * size + c, view.color[r * size + c]);
            }
        }
    }
    Ok(strip)
}

pub const REFERENCE_IMAGE: &str = "reference.png";
pub const REFERENCE_MASK: &str = "reference_mask.png";

/// Copies the reference image and mask next to the checkpoints, which is
/// all a later render needs besides the checkpoint.
pub fn save_reference(conditioning: &ReferenceConditioning, dir: &Path) -> Result<(), TrainError> {
    conditioning.image.save_png(&dir.join(REFERENCE_IMAGE))?;
    conditioning.mask.save_png(&dir.join(REFERENCE_MASK))?;
    Ok(())
}

pub fn load_reference(image: &Path, mask: &Path) -> Result<ReferenceConditioning, TrainError> {
    let image = RgbImage::load_png(image)?;
    let mask = ScalarMap::load_png(mask)?;
    Ok(ReferenceConditioning::new(image, mask, None, CameraPose::reference(), "")?)
}

/// Files written by [`run`].
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

/// Trains to completion, appending to `loss.jsonl`, writing
/// `ckpt_<step>.crad` and `preview_<step>.png` periodically and
/// `checkpoint.crad` at the end, plus the reference image and mask. A failed step still leaves a resumable
/// `checkpoint.crad` behind.
pub fn run(trainer: &mut Trainer<'_>, out_dir: &Path) -> Result<RunOutputs, TrainError> {
    std::fs::create_dir_all(out_dir)?;
    save_reference(trainer.conditioning, out_dir)?;
    let outputs = RunOutputs { checkpoint: out_dir.join("checkpoint.crad"), loss_log: out_dir.join("loss.jsonl") };
    let mut log = BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(trainer.step() > 0)
            .write(true)
            .truncate(trainer.step() == 0)
            .open(&outputs.loss_log)?,
    );
    while !trainer.is_done() {
        let report = match trainer.train_step() {
            Ok(r) => r,
            Err(e) => {
                log.flush()?;
                trainer.checkpoint().save(&outputs.checkpoint)?;
                return Err(e);
            }
        };
        serde_json::to_writer(&mut log, &report).map_err(std::io::Error::other)?;
        log.write_all(b"\n")?;
        let done = trainer.step();
        let cfg = trainer.config();
        if cfg.checkpoint_every > 0 && done.is_multiple_of(cfg.checkpoint_every) {
            trainer.checkpoint().save(&out_dir.join(format!("ckpt_{done:06}.crad")))?;
        }
        if cfg.preview_every > 0 && done.is_multiple_of(cfg.preview_every) {
            preview_strip(trainer, cfg.preview_resolution)?
                .save_png(&out_dir.join(format!("preview_{done:06}.png")))?;
        }
    }
    log.flush()?;
    trainer.checkpoint().save(&outputs.checkpoint)?;
    Ok(outputs)
}

/// Loads a JSON config file.
pub fn load_config(path: &Path) -> Result<TrainConfig, TrainError> {
    let mut text = String::new();
    std::io::Read::read_to_string(&mut File::open(path)?, &mut text)?;
    TrainConfig::from_json(&text)
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use conrad::checkpoint::{Checkpoint, CheckpointError};
use conrad::constraint::ReferenceConditioning;
use conrad::eval::{evaluate, EvalError, FeatureSet};
use conrad::imaging::{ImageError, RgbImage, ScalarMap};
use conrad::provider::{DiffusionSchedule, DiracProvider, MultiViewOracle, RemoteProvider, ScoreProvider};
use conrad::render::RenderError;
use conrad::scene::{parse_poses, read_pose_file, CameraIntrinsics, CameraPose};
use conrad::toy::{make_toy, ToyShape};
use conrad::train::{self, model_from_checkpoint, render_constrained, TrainConfig, TrainError, Trainer};

#[derive(Parser)]
#[command(name = "conrad", version, about = "Image-constrained radiance fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a field for one input image.
    Train {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Relative depth estimate (raw float map).
        #[arg(long)]
        depth: Option<PathBuf>,
        /// Training configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// dirac:<image.png>, remote:<url> or oracle:<sphere|cube>;
        /// falls back to CONRAD_PROVIDER_URL.
        #[arg(long)]
        provider: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides total_steps from the config.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render a checkpoint from every pose in a pose file.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// Lines of `azimuth elevation radius` in degrees.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Defaults to the reference image saved next to the checkpoint.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Feature-distance metrics for all views and near-reference views.
    Eval {
        #[arg(long)]
        gt_features: PathBuf,
        #[arg(long)]
        rendered_features: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        /// `azimuth elevation radius` in degrees.
        #[arg(long, default_value = "0 0 3.2")]
        ref_pose: String,
        /// Feature file whose single row is the reference image; defaults
        /// to the ground-truth row nearest the reference pose.
        #[arg(long)]
        ref_features: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an exact image, mask and depth of a procedural object.
    MakeToy {
        #[arg(long)]
        shape: ToyShape,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

/// Failure classes with their exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Io(String),
    Numeric(String),
    Provider(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Io(_) => 3,
            Self::Numeric(_) => 4,
            Self::Provider(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Io(m) | Self::Numeric(m) | Self::Provider(m) => m,
        }
    }
}

impl From<ImageError> for Failure {
    fn from(e: ImageError) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(_) | EvalError::BadMagic | EvalError::Version(_) | EvalError::Truncated => {
                Self::Io(e.to_string())
            }
            EvalError::NonFinite(_) | EvalError::ZeroVector(_) => Self::Numeric(e.to_string()),
            EvalError::Shape(_) | EvalError::Empty => Self::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let msg = e.to_string();
        if e.provider_error().is_some() {
            return Self::Provider(msg);
        }
        match e {
            TrainError::Io(_) | TrainError::Image(_) | TrainError::Checkpoint(_) => Self::Io(msg),
            TrainError::Config(_) | TrainError::Scene(_) | TrainError::Field(_) | TrainError::Constraint(_) => {
                Self::Usage(msg)
            }
            TrainError::Render(RenderError::Config(_)) => Self::Usage(msg),
            TrainError::Loss { .. } | TrainError::Optimizer { .. } | TrainError::Render(_) => Self::Numeric(msg),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { image, mask, depth, config, out, provider, seed, steps, resume } => cmd_train(
            &image,
            &mask,
            depth.as_deref(),
            config.as_deref(),
            &out,
            provider,
            seed,
            steps,
            resume.as_deref(),
        ),
        Command::Render { ckpt, poses, out, resolution, image, mask } => {
            cmd_render(&ckpt, &poses, &out, resolution, image.as_deref(), mask.as_deref())
        }
        Command::Eval { gt_features, rendered_features, poses, ref_pose, ref_features, out } => {
            cmd_eval(&gt_features, &rendered_features, &poses, &ref_pose, ref_features.as_deref(), &out)
        }
        Command::MakeToy { shape, out, size } => make_toy(shape, size, &out).map(|_| ()).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn load_conditioning(image: &Path, mask: &Path, depth: Option<&Path>) -> Result<ReferenceConditioning, Failure> {
    let image = RgbImage::load_png(image)?;
    let mask = ScalarMap::load_png(mask)?;
    let depth = depth.map(ScalarMap::load_raw).transpose()?;
    ReferenceConditioning::new(image, mask, depth, CameraPose::reference(), "reference")
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn make_provider(
    spec: Option<String>,
    cond: &mut ReferenceConditioning,
    cfg: &TrainConfig,
) -> Result<Box<dyn ScoreProvider>, Failure> {
    let spec = match spec.or_else(|| std::env::var("CONRAD_PROVIDER_URL").ok().map(|u| format!("remote:{u}"))) {
        Some(s) => s,
        None => return Err(Failure::Usage("no --provider given and CONRAD_PROVIDER_URL is unset".into())),
    };
    let size = cfg.resolution;
    let shape = [size, size, 3];
    let schedule = DiffusionSchedule::new(cfg.schedule.clone()).map_err(|e| Failure::Usage(e.to_string()))?;
    let (kind, arg) = spec.split_once(':').ok_or_else(|| Failure::Usage(format!("bad provider `{spec}`")))?;
    match kind {
        "dirac" => {
            let target = RgbImage::load_png(Path::new(arg))?;
            if (target.width, target.height) != (size, size) {
                return Err(Failure::Usage(format!(
                    "dirac target is {}x{}, training renders are {size}x{size}",
                    target.width, target.height
                )));
            }
            let values = target.data.iter().map(|&v| v as f64).collect();
            Ok(Box::new(DiracProvider::new(values, shape, schedule).map_err(|e| Failure::Usage(e.to_string()))?))
        }
        "oracle" => {
            let toy: ToyShape = arg.parse().map_err(Failure::Usage)?;
            let intr = CameraIntrinsics::square(size);
            let render = move |pose: &CameraPose| toy.render(pose, &intr).image;
            Ok(Box::new(MultiViewOracle { render, shape, schedule }))
        }
        "remote" => {
            let remote = RemoteProvider::new(arg);
            remote.health().map_err(|e| Failure::Provider(e.to_string()))?;
            let image: Vec<f64> = cond.image.data.iter().map(|&v| v as f64).collect();
            let ref_shape = [cond.image.height, cond.image.width, 3];
            cond.cond_id = remote
                .invert(&[&image], ref_shape, "object", None, None)
                .map_err(|e| Failure::Provider(e.to_string()))?;
            Ok(Box::new(remote))
        }
        other => Err(Failure::Usage(format!("unknown provider kind `{other}`"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    image: &Path,
    mask: &Path,
    depth: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    provider: Option<String>,
    seed: Option<u64>,
    steps: Option<u64>,
    resume: Option<&Path>,
) -> Result<(), Failure> {
    let mut cond = load_conditioning(image, mask, depth)?;
    let checkpoint = resume.map(Checkpoint::load).transpose()?;
    let mut cfg = match (&checkpoint, config) {
        (Some(c), _) => c.config.clone(),
        (None, Some(path)) => train::load_config(path)?,
        (None, None) => TrainConfig::default(),
    };
    if checkpoint.is_none() {
        cfg.seed = seed.unwrap_or(cfg.seed);
        cfg.total_steps = steps.unwrap_or(cfg.total_steps);
        cfg.validate()?;
    }
    let mut provider = make_provider(provider, &mut cond, &cfg)?;
    let mut trainer = match checkpoint {
        Some(c) => Trainer::resume(&cond, c, provider.as_mut())?,
        None => Trainer::new(&cond, cfg, provider.as_mut())?,
    };
    let outputs = train::run(&mut trainer, out)?;
    println!("{}", outputs.checkpoint.display());
    Ok(())
}

fn cmd_render(
    ckpt: &Path,
    poses: &Path,
    out: &Path,
    resolution: usize,
    image: Option<&Path>,
    mask: Option<&Path>,
) -> Result<(), Failure> {
    if resolution == 0 {
        return Err(Failure::Usage("resolution must be positive".into()));
    }
    let checkpoint = Checkpoint::load(ckpt)?;
    let poses = read_pose_file(poses)?.map_err(|e| Failure::Usage(e.to_string()))?;
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let image = image.map(Path::to_path_buf).unwrap_or_else(|| dir.join(train::REFERENCE_IMAGE));
    let mask = mask.map(Path::to_path_buf).unwrap_or_else(|| dir.join(train::REFERENCE_MASK));
    let cond = train::load_reference(&image, &mask)?;
    let (field, params) = model_from_checkpoint(&checkpoint)?;
    let intr = CameraIntrinsics::square(resolution);
    let views = render_constrained(&field, &params, &cond, &checkpoint.config, &poses, &intr, 1.0)?;
    std::fs::create_dir_all(out)?;
    for (i, view) in views.iter().enumerate() {
        view.to_image().save_png(&out.join(format!("view_{i:03}.png")))?;
        view.depth_map().save_raw(&out.join(format!("view_{i:03}_depth.raw")))?;
    }
    Ok(())
}

fn cmd_eval(
    gt: &Path,
    rendered: &Path,
    poses_path: &Path,
    ref_pose: &str,
    ref_features: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let gt_set = FeatureSet::load(gt)?;
    let rendered_set = FeatureSet::load(rendered)?;
    let poses = read_pose_file(poses_path)?.map_err(|e| Failure::Usage(e.to_string()))?;
    let reference = match parse_poses(ref_pose).map_err(|e| Failure::Usage(format!("--ref-pose: {e}")))?.as_slice() {
        [p] => *p,
        _ => return Err(Failure::Usage("--ref-pose takes a single pose".into())),
    };
    let ref_row = ref_features.map(FeatureSet::load).transpose()?;
    if ref_row.as_ref().is_some_and(|r| r.len() != 1) {
        return Err(Failure::Usage("--ref-features must hold exactly one row".into()));
    }
    let provenance = serde_json::json!({
        "poses": poses_path.display().to_string(),
        "gt_features": gt.display().to_string(),
        "rendered_features": rendered.display().to_string(),
        "reference": match ref_features {
            Some(p) => p.display().to_string(),
            None => "ground-truth view nearest the reference pose".to_string(),
        },
    });
    let report = evaluate(&gt_set, &rendered_set, &poses, &reference, ref_row.as_ref().map(|r| r.row(0)), provenance)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Io(e.to_string()))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, text + "\n")?;
    Ok(())
}

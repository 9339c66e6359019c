//! Trains on a procedural object with an exact multi-view denoiser and
//! reports held-out PSNR. The config, final checkpoint and renders (next to
//! the analytic truth) land in `<out>`.
//!
//! cargo run --example train_toy -- [sphere|cube] [steps] [out] [config.json]

use std::path::PathBuf;
use std::time::Instant;

use conrad::imaging::{psnr, RgbImage};
use conrad::provider::{DiffusionSchedule, MultiViewOracle};
use conrad::scene::{CameraIntrinsics, CameraPose};
use conrad::toy::{toy_conditioning, ToyShape};
use conrad::train::{load_config, TrainConfig, Trainer};

fn side_by_side(a: &RgbImage, b: &RgbImage) -> RgbImage {
    let mut out = RgbImage::filled(a.width + b.width, a.height, [1.0; 3]);
    for r in 0..a.height {
        for c in 0..a.width {
            out.set_pixel(r, c, a.pixel(r, c));
            out.set_pixel(r, a.width + c, b.pixel(r, c));
        }
    }
    out
}

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let shape: ToyShape = args.next().as_deref().unwrap_or("sphere").parse().map_err(anyhow::Error::msg)?;
    let steps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1000);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/train_toy".into()));
    let mut cfg = match args.next() {
        Some(path) => load_config(path.as_ref())?,
        None => TrainConfig::toy(steps),
    };
    cfg.total_steps = steps;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.json"), cfg.to_json())?;

    let size = cfg.resolution;
    let intr = CameraIntrinsics::square(size);
    let cond = toy_conditioning(shape, size, true);
    let mut oracle = MultiViewOracle {
        render: move |pose: &CameraPose| shape.render(pose, &intr).image,
        shape: [size, size, 3],
        schedule: DiffusionSchedule::new(cfg.schedule.clone())?,
    };
    let mut trainer = Trainer::new(&cond, cfg, &mut oracle)?;
    let start = Instant::now();
    while !trainer.is_done() {
        let r = trainer.train_step()?;
        if r.step % 100 == 0 {
            let per_step = start.elapsed().as_secs_f64() / (r.step + 1) as f64;
            println!(
                "step {:>5}  sds {:.4}  depth {:.4}  alpha {:.2}  {per_step:.2}s/step",
                r.step, r.sds, r.depth, r.alpha_ws
            );
        }
    }
    trainer.checkpoint().save(&out.join("checkpoint.crad"))?;
    for az in [45.0, 135.0, 225.0, 315.0] {
        let pose = CameraPose::from_degrees(az, 15.0, 3.2)?;
        let view = trainer.render(&pose, &intr, 1.0)?.to_image();
        let truth = shape.render(&pose, &intr).rgb();
        println!("azimuth {az:>5}: PSNR {:.2} dB", psnr(&view, &truth));
        side_by_side(&view, &truth).save_png(&out.join(format!("heldout_{az:03}.png")))?;
    }
    Ok(())
}

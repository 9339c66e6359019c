//! Ray-marches the toy sphere as a density volume and compares the result
//! with its exact surface render.
//!
//! cargo run --example render_volume -- [n_samples]

use conrad::imaging::psnr;
use conrad::render::{render_view, MarchConfig, RenderedView};
use conrad::scene::{CameraIntrinsics, CameraPose};
use conrad::toy::{ToyShape, ToyVolume};

fn main() -> anyhow::Result<()> {
    let n_samples: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(128);
    let intr = CameraIntrinsics::square(64);
    let pose = CameraPose::from_degrees(30.0, 20.0, 3.2)?;
    let volume = ToyVolume { shape: ToyShape::Sphere, sigma: 200.0 };
    let cfg = MarchConfig { n_samples, ..Default::default() };
    let view: RenderedView<f64> = render_view(&pose, &intr, &volume, &cfg)?;
    let exact = ToyShape::Sphere.render(&pose, &intr);

    let hits: Vec<usize> = (0..exact.mask.len()).filter(|&i| exact.mask[i] == 1.0).collect();
    let depth_err = hits.iter().map(|&i| (view.depth[i] - exact.depth[i]).abs()).sum::<f64>() / hits.len() as f64;
    println!(
        "{n_samples} samples: PSNR {:.2} dB, mean depth error {depth_err:.4}",
        psnr(&view.to_image(), &exact.rgb())
    );
    view.to_image().save_png(std::path::Path::new("target/render_volume.png"))?;
    Ok(())
}

//! Talks to a running model server: health check, textual inversion of a
//! toy image, one noise prediction and the resulting SDS residual.
//!
//! cargo run --example remote_provider -- http://127.0.0.1:8765

use conrad::objectives::{sds_adjoint, SdsConfig};
use conrad::provider::{Conditioning, DiffusionSchedule, RemoteProvider};
use conrad::scene::{CameraIntrinsics, CameraPose};
use conrad::toy::ToyShape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let url = std::env::args()
        .nth(1)
        .or_else(|| std::env::var("CONRAD_PROVIDER_URL").ok())
        .ok_or_else(|| anyhow::anyhow!("pass a server URL or set CONRAD_PROVIDER_URL"))?;
    let mut provider = RemoteProvider::new(url);
    println!("health: {}", provider.health()?.status);

    let size = 64;
    let image = ToyShape::Cube.render(&CameraPose::reference(), &CameraIntrinsics::square(size)).image;
    let shape = [size, size, 3];
    let cond_id = provider.invert(&[&image], shape, "cube", None, None)?;
    println!("cond_id: {cond_id}");

    let cond = Conditioning { cond_id, view: None };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = sds_adjoint(
        &image,
        shape,
        &mut provider,
        &DiffusionSchedule::default(),
        &cond,
        &SdsConfig::default(),
        &mut rng,
    )?;
    println!("t = {}, mean squared residual {:.4e} after {} attempt(s)", out.t, out.residual, out.attempts);
    Ok(())
}

//! Score distillation against an exact point-mass denoiser: gradient descent
//! on raw pixels walks an image to the denoiser's target.

use conrad::objectives::{sds_adjoint, SdsConfig};
use conrad::provider::{Conditioning, DiffusionSchedule, DiracProvider};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let shape = [8, 8, 3];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let target: Vec<f64> = (0..192).map(|_| rng.random()).collect();
    let schedule = DiffusionSchedule::default();
    let mut provider = DiracProvider::new(target.clone(), shape, schedule.clone())?;
    let cond = Conditioning { cond_id: "dirac".into(), view: None };
    let config = SdsConfig::default();

    let mut image = vec![0.5; 192];
    for step in 0..=1500 {
        if step % 300 == 0 {
            let mse = image.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 192.0;
            println!("step {step:>4}: MSE {mse:.2e}");
        }
        let out = sds_adjoint(&image, shape, &mut provider, &schedule, &cond, &config, &mut rng)?;
        for (x, g) in image.iter_mut().zip(&out.adjoint) {
            *x -= 0.01 * g;
        }
    }
    Ok(())
}

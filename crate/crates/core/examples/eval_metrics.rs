//! Feature-distance metrics on the evaluation rig with synthetic features:
//! renders are noisy copies of the ground truth, shuffled within each
//! elevation ring.

use conrad::eval::{evaluate, FeatureSet};
use conrad::scene::{canonical_rig, CameraPose};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    const DIM: usize = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let poses = canonical_rig();
    let gt: Vec<f64> = (0..poses.len() * DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut order: Vec<usize> = (0..poses.len()).collect();
    for ring in order.chunks_mut(17) {
        ring.shuffle(&mut rng);
    }
    let rendered: Vec<f64> = order
        .iter()
        .flat_map(|&i| gt[i * DIM..(i + 1) * DIM].to_vec())
        .map(|v| v + rng.random_range(-0.3..0.3))
        .collect();
    let gt = FeatureSet::from_rows(DIM, gt)?;
    let rendered = FeatureSet::from_rows(DIM, rendered)?;
    let report = evaluate(&gt, &rendered, &poses, &CameraPose::reference(), None, serde_json::json!("synthetic"))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

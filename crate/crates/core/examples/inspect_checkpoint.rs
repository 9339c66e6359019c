//! Prints what a training checkpoint holds.
//!
//! cargo run --example inspect_checkpoint -- run/checkpoint.crad

use conrad::checkpoint::Checkpoint;
use conrad::train::model_from_checkpoint;

fn main() -> anyhow::Result<()> {
    let path = std::env::args().nth(1).ok_or_else(|| anyhow::anyhow!("usage: inspect_checkpoint <file.crad>"))?;
    let ckpt = Checkpoint::load(path.as_ref())?;
    let (field, params) = model_from_checkpoint(&ckpt)?;
    println!("step {} of {}", ckpt.step, ckpt.config.total_steps);
    println!("optimizer {:?} at update {}", ckpt.optimizer.kind, ckpt.optimizer.step);
    for seg in field.layout().segments() {
        let v = &params.values[seg.range()];
        let rms = (v.iter().map(|x| (x * x) as f64).sum::<f64>() / v.len().max(1) as f64).sqrt();
        println!("  {:<24} {:>9} params  rms {rms:.4}", seg.name, v.len());
    }
    Ok(())
}

//! The Pearson depth loss ignores the unknown scale and offset of a
//! monocular depth estimate.

use conrad::objectives::depth_loss;

fn main() -> anyhow::Result<()> {
    let rendered: Vec<f64> = (0..64).map(|i| 2.5 + 0.01 * i as f64 + 0.05 * (i as f64 * 0.7).sin()).collect();
    let select = vec![true; rendered.len()];
    let disparity_like: Vec<f64> = rendered.iter().map(|d| 40.0 - 7.0 * d).collect();
    let affine: Vec<f64> = rendered.iter().map(|d| 0.3 * d + 12.0).collect();
    let noisy: Vec<f64> = rendered.iter().enumerate().map(|(i, d)| d + 0.05 * ((i * 37 % 11) as f64 - 5.0)).collect();
    for (name, est) in [("affine copy", &affine), ("noisy copy", &noisy), ("inverted", &disparity_like)] {
        let l = depth_loss(&rendered, est, &select)?;
        println!(
            "{name:<12} loss {:.3e}  |grad| {:.3e}",
            l.loss.abs(),
            l.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
        );
    }
    Ok(())
}

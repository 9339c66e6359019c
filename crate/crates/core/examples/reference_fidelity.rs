//! Renders the reference view of a randomly initialized field through the
//! reference-image constraint. Whatever the field, foreground pixels stay
//! within `η + (1 − alpha)` of the input and background pixels stay empty
//! once the constraint is at full strength.

use conrad::field::RadianceField;
use conrad::grad::ParamStore;
use conrad::toy::{toy_conditioning, ToyShape};
use conrad::train::{render_constrained, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let cond = toy_conditioning(ToyShape::Cube, 64, false);
    let cfg = TrainConfig::toy(1);
    let field = RadianceField::new(cfg.field.clone())?;
    let params: ParamStore<f32> = field.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    for alpha_ws in [0.0, 0.5, 1.0] {
        let view =
            render_constrained(&field, &params, &cond, &cfg, &[cond.pose], &cond.intrinsics, alpha_ws)?.remove(0);
        let (mut excess, mut bg_alpha) = (f32::NEG_INFINITY, 0.0f32);
        for (i, c) in view.color.iter().enumerate() {
            let a = view.alpha[i];
            if cond.mask.data[i] >= 0.5 {
                for (ck, ik) in c.iter().zip(&cond.image.data[3 * i..3 * i + 3]) {
                    excess = excess.max((ck - ik).abs() - (1.0 - a));
                }
            } else {
                bg_alpha = bg_alpha.max(a);
            }
        }
        println!(
            "α_ws = {alpha_ws:.1}: worst |C − Î| − (1 − alpha) = {excess:+.3}, worst background alpha {bg_alpha:.3}"
        );
    }
    Ok(())
}

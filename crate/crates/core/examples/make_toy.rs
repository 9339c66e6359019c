//! Writes the exact reference image, mask and depth of a procedural object.
//!
//! cargo run --example make_toy -- [sphere|cube] [size] [out_dir]

use std::path::PathBuf;

use conrad::toy::{make_toy, ToyShape};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let shape: ToyShape = args.next().as_deref().unwrap_or("sphere").parse().map_err(anyhow::Error::msg)?;
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(64);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/toy".into()));
    let files = make_toy(shape, size, &out)?;
    println!("{}\n{}\n{}", files.image.display(), files.mask.display(), files.depth.display());
    Ok(())
}

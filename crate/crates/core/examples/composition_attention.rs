//! One W-CCA block: patch split, rank-1 factor regression, composition and
//! aggregation, plus its operation count at several resolutions.

use freqdis::wcca::{self, Wcca, WccaConfig};
use freqdis::weights::WeightStore;
use freqdis::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> freqdis::Result<()> {
    let cfg = WccaConfig::default();
    let block = Wcca::new(cfg, "demo")?;
    let mut store = WeightStore::<f32>::new();
    block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
    println!("block parameters: {}", store.param_count());

    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false)?;
    let x = tape.constant(Tensor::from_fn(&[1, 16, 32, 32], |i| {
        ((i % 97) as f32 / 97.0) - 0.5
    }))?;
    let patches = block.split_patches(&mut tape, &p, x)?;
    let factors = block.regress_factors(&mut tape, &p, &patches)?;
    println!(
        "{} patches per image; factor maps h {:?}, w {:?}, c {:?}",
        patches.len(),
        tape.shape(factors.h),
        tape.shape(factors.w),
        tape.shape(factors.c)
    );
    let o = wcca::compose_similarity(&mut tape, &factors)?;
    let y = wcca::omni_aggregate(&mut tape, patches.map, o)?;
    println!("output {:?}", tape.shape(y));

    for side in [64, 128, 256] {
        println!(
            "{side}×{side}: analytic {:>10}  empirical {:>11}",
            wcca::flops_analytic(side as u64, side as u64, 16, 8),
            wcca::flops_empirical(side, side, cfg)?
        );
    }
    Ok(())
}

//! Saving and loading weight files, and inspecting their contents.

use freqdis::acca::{Acca, AccaConfig};
use freqdis::weights::WeightStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> freqdis::Result<()> {
    let acca = Acca::new(AccaConfig::default())?;
    let store: WeightStore<f32> = acca.init(&mut ChaCha8Rng::seed_from_u64(0));
    let path = std::env::temp_dir().join("freqdis-example-acca.fdw");
    store.save(&path)?;
    let loaded = WeightStore::<f32>::load(&path)?;
    assert_eq!(loaded.to_bytes()?, store.to_bytes()?);
    println!(
        "{} tensors, {} values, {} bytes",
        loaded.len(),
        loaded.param_count(),
        std::fs::metadata(&path).map_or(0, |m| m.len())
    );
    for (name, t) in loaded.iter().take(6) {
        println!("  {name:<28} {:?}", t.shape());
    }
    println!("  ...");
    std::fs::remove_file(&path).ok();
    Ok(())
}

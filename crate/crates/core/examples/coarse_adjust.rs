//! The coarse colour and illumination model on a synthetic dark image:
//! parameter budget, the identity start, and the adjustment maps.

use freqdis::acca::{Acca, AccaConfig};
use freqdis::evalkit::{clean_image, psnr, synth_pair, SynthSpec};
use freqdis::weights::WeightStore;
use freqdis::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> freqdis::Result<()> {
    let acca = Acca::new(AccaConfig::default())?;
    let weights: WeightStore<f32> = acca.init(&mut ChaCha8Rng::seed_from_u64(1));
    println!("parameters: {}", Acca::param_count(&weights));

    let (low, gt) = synth_pair(
        &clean_image(2, 0, 64),
        &SynthSpec::fixed(2.5, 0.2, 0.02, 3),
        0,
    )?;
    let out = acca.infer(&weights, &low)?;
    println!(
        "untrained output vs input: max difference {:.2e}",
        out.max_abs_diff(&low)?
    );
    println!("input PSNR {:.2} dB", psnr(&low, &gt, 1.0)?);

    let mut tape = Tape::new();
    let p = weights.bind(&mut tape, false)?;
    let x = tape.constant(low)?;
    let trace = acca.forward(&mut tape, &p, x)?;
    let params = trace.params(&tape);
    println!("A_l {:?}, B_l {:?}", params.a_l.shape(), params.b_l.shape());
    println!("A_g {:?} = {:?}", params.a_g.shape(), params.a_g.data());
    println!("B_g {:?} = {:?}", params.b_g.shape(), params.b_g.data());
    Ok(())
}

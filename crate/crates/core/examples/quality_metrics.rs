//! PSNR and SSIM across the synthetic degradation range.

use freqdis::evalkit::{clean_image, psnr, ssim, synth_pair, SynthSpec};

fn main() -> freqdis::Result<()> {
    let clean = clean_image(4, 0, 64);
    println!("gamma  gain  sigma   PSNR     SSIM");
    for (gamma, gain, sigma) in [
        (1.0, 1.0, 0.0),
        (1.0, 1.0, 0.02),
        (2.0, 0.4, 0.01),
        (3.5, 0.1, 0.05),
    ] {
        let (low, gt) = synth_pair(&clean, &SynthSpec::fixed(gamma, gain, sigma, 0), 0)?;
        println!(
            "{gamma:5.1} {gain:5.2} {sigma:6.2} {:7.2} {:8.4}",
            psnr(&low, &gt, 1.0)?,
            ssim(&low, &gt, 1.0)?
        );
    }
    Ok(())
}

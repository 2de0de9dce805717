//! Both training phases on a small synthetic set, then enhancement of a
//! held-out pair. Takes about a minute in release mode.

use freqdis::evalkit::{evaluate, PairSet, SynthSpec};
use freqdis::training::{self, TrainConfig};

fn main() -> freqdis::Result<()> {
    let data = PairSet::synthesize(&SynthSpec::default(), 48, 64)?;
    let (train, test) = data.split(40);
    let cfg = TrainConfig {
        acca_epochs: 5,
        ldrm_iters: 150,
        crop: 32,
        lr0: 1e-3,
        ..TrainConfig::default()
    };

    let coarse = training::train_acca(&train, &cfg)?;
    let (a, b) = coarse.history.head_tail(5);
    println!(
        "coarse phase: {} steps, L1 {a:.4} -> {b:.4}",
        coarse.history.rows.len()
    );
    for note in &coarse.history.notes {
        println!("  note: {note}");
    }

    let fine = training::train_ldrm(&train, Some(&coarse.weights), &cfg)?;
    let (a, b) = fine.history.head_tail(10);
    println!(
        "fine phase: {} steps, band loss {a:.4} -> {b:.4}",
        fine.history.rows.len()
    );

    let pipe = training::pipeline(&cfg, fine.acca_weights, fine.ldrm_weights)?;
    let input = evaluate(&test, |x| Ok(x.clone()))?;
    let coarse_only = evaluate(&test, |x| Ok(pipe.run(x)?.1))?;
    let full = evaluate(&test, |x| Ok(pipe.run(x)?.0))?;
    println!(
        "test PSNR: input {:.2}, coarse {:.2}, full {:.2} dB",
        input.psnr_mean, coarse_only.psnr_mean, full.psnr_mean
    );
    println!(
        "test SSIM: input {:.3}, coarse {:.3}, full {:.3}",
        input.ssim_mean, coarse_only.ssim_mean, full.ssim_mean
    );
    Ok(())
}

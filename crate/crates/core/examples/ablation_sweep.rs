//! A reduced consistency-weight sweep over two seeds. The CLI `ablate`
//! command runs the full suites.

use freqdis::evalkit::ablation::{self, Suite};
use freqdis::evalkit::{PairSet, SynthSpec};
use freqdis::training::TrainConfig;

fn main() -> freqdis::Result<()> {
    let data = PairSet::synthesize(&SynthSpec::default(), 40, 32)?;
    let (train, test) = data.split(32);
    let base = TrainConfig {
        acca_epochs: 3,
        ldrm_iters: 60,
        crop: 32,
        lr0: 1e-3,
        ..TrainConfig::default()
    };
    let seeds = [0, 1];
    let trained = ablation::train_suite(Suite::Alpha, &base, &train, &seeds, |m| eprintln!("{m}"))?;
    let table = ablation::ablation_report(Suite::Alpha, &base, &test, &seeds, &trained)?;
    print!("{}", table.to_csv());
    for c in &table.checks {
        println!(
            "{}: {} ({})",
            if c.holds { "holds" } else { "violated" },
            c.claim,
            c.detail
        );
    }
    Ok(())
}

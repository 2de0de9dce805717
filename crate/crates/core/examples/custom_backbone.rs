//! Plugging a different band restorer into the pipeline through the
//! backbone registry. Registration dry-runs the channel contract.

use freqdis::ldrm::{Backbone, BackboneRegistry, BackboneSpec};
use freqdis::nn;
use freqdis::tensor::{ConvSpec, PadMode};
use freqdis::weights::{Bound, WeightStore};
use freqdis::{Real, Tape, Var};
use rand::RngCore;

/// A single 3×3 convolution, zero-initialised.
struct OneConv(BackboneSpec);

impl<T: Real> Backbone<T> for OneConv {
    fn in_channels(&self) -> usize {
        self.0.in_channels
    }
    fn out_channels(&self) -> usize {
        self.0.out_channels
    }
    fn init(&self, _rng: &mut dyn RngCore) -> WeightStore<T> {
        let mut s = WeightStore::new();
        nn::zero_conv(
            &mut s,
            "ldrm.one",
            self.0.out_channels,
            self.0.in_channels,
            3,
        );
        s
    }
    fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> freqdis::Result<Var> {
        nn::conv(tape, p, "ldrm.one", x, ConvSpec::same(PadMode::Reflect, 3))
    }
}

/// Drops one output channel, so it breaks the contract.
struct Short(BackboneSpec);

impl<T: Real> Backbone<T> for Short {
    fn in_channels(&self) -> usize {
        self.0.in_channels
    }
    fn out_channels(&self) -> usize {
        self.0.out_channels
    }
    fn init(&self, _rng: &mut dyn RngCore) -> WeightStore<T> {
        let mut s = WeightStore::new();
        nn::zero_conv(
            &mut s,
            "ldrm.short",
            self.0.out_channels - 1,
            self.0.in_channels,
            1,
        );
        s
    }
    fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> freqdis::Result<Var> {
        nn::conv(tape, p, "ldrm.short", x, ConvSpec::same(PadMode::Zero, 1))
    }
}

fn main() -> freqdis::Result<()> {
    let mut registry = BackboneRegistry::<f32>::with_defaults();
    registry.register("one-conv", |spec| {
        Box::new(OneConv(spec)) as Box<dyn Backbone<f32>>
    })?;
    match registry.register("short", |spec| {
        Box::new(Short(spec)) as Box<dyn Backbone<f32>>
    }) {
        Ok(()) => println!("unexpectedly accepted"),
        Err(e) => println!("rejected: {e}"),
    }
    println!("registered: {:?}", registry.names().collect::<Vec<_>>());
    let net = registry.build("one-conv", BackboneSpec::for_levels(4, 0, 0))?;
    let w = net.init(&mut rand::rng());
    println!(
        "one-conv: {} → {} channels, {} parameters",
        net.in_channels(),
        net.out_channels(),
        w.param_count()
    );
    Ok(())
}

//! Decompose a synthetic image into Laplace bands and rebuild it with both
//! codec modes.

use freqdis::evalkit::clean_image;
use freqdis::pyramid::{CodecMode, PyramidStack};

fn main() -> freqdis::Result<()> {
    let image = clean_image(7, 0, 64);
    for mode in [CodecMode::Exact, CodecMode::Literal] {
        let stack = PyramidStack::decompose(&image, 4, mode)?;
        for (k, band) in stack.bands().iter().enumerate() {
            let energy = band.data().iter().map(|v| v * v).sum::<f32>() / band.len() as f32;
            println!(
                "{mode:?} band {} {:?} mean energy {energy:.5}",
                k + 1,
                band.shape()
            );
        }
        let err = stack.reconstruct()?.max_abs_diff(&image)?;
        println!("{mode:?} reconstruction max error {err:.3e}\n");
    }
    Ok(())
}

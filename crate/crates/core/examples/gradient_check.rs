//! Finite-difference verification of every tape primitive.

use freqdis::tensor::gradcheck::{primitive_suite, PRIMITIVE_TOL};

fn main() -> freqdis::Result<()> {
    for (name, r) in primitive_suite(0)? {
        let verdict = if r.passed() { "ok" } else { "FAILED" };
        println!(
            "{name:<28} {:>4} values  max rel err {:.2e}  {verdict}",
            r.elements, r.max_error
        );
    }
    println!("tolerance {PRIMITIVE_TOL:.0e}");
    Ok(())
}

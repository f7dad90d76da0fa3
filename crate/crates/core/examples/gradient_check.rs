//! Finite-difference check of every differentiable layer and of a small
//! end-to-end segmenter.

use weakseg::gradcheck::{run_suite, LAYER_TOLERANCE};

fn main() -> weakseg::Result<()> {
    let results = run_suite(LAYER_TOLERANCE)?;
    for r in &results {
        let status = if r.passed() { "ok  " } else { "FAIL" };
        println!("{status} {:<32} {:.2e} (< {:.0e})", r.name, r.max_rel_error, r.tolerance);
    }
    Ok(())
}

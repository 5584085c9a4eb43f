//! Runs the synthetic rescoring recipe for one seed and prints a summary.
//!
//! `cargo run --release -p rescore-core --example recipe -- [seed]`

use rescore_core::pipeline::recipe::{run_recipe, RecipeConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let cfg = RecipeConfig::toy(seed);
    let out = run_recipe(&cfg)?;
    println!(
        "seed {seed}: first-pass test {:.4} oracle {:.4} (dev {:.4} / {:.4}) in {:.0}s",
        out.first_pass_test_wer, out.oracle_test_wer, out.first_pass_dev_wer, out.oracle_dev_wer, out.seconds
    );
    for s in &out.systems {
        println!(
            "  {:<10} dev {:.4} (beta {:.2})  test {:.4}  [{:.0}s]",
            s.name, s.dev.wer, s.dev.beta, s.test_wer, s.seconds
        );
    }
    Ok(())
}

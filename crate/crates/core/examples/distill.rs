//! Runs the teacher → student distillation experiment for one seed.
//!
//! `cargo run --release -p rescore-core --example distill -- [seed]`

use rescore_core::pipeline::recipe::{run_distillation, DistillRecipeConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let out = run_distillation(&DistillRecipeConfig::toy(seed))?;
    println!(
        "seed {seed}: teacher {} params, student {} params, first-pass test {:.4} in {:.0}s",
        out.teacher_params, out.student_params, out.first_pass_test_wer, out.seconds
    );
    for s in [&out.teacher, &out.student] {
        println!("  {:<12} dev {:.4} (beta {:.2})  test {:.4}  [{:.0}s]", s.name, s.dev.wer, s.dev.beta, s.test_wer, s.seconds);
    }
    Ok(())
}

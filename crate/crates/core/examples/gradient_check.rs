//! Finite-difference checks of every differentiable kernel.
//!
//! cargo run --release --example gradient_check -- [shapes] [seed]

use mdnet::tensor::gradcheck::{run_suite, OpKind, DEFAULT_TOLERANCE};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let shapes = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);

    let reports = run_suite(&OpKind::DIFFERENTIABLE, shapes, seed)?;
    let failed = reports.iter().filter(|r| !r.passed(DEFAULT_TOLERANCE)).count();
    for r in &reports {
        println!("{r}");
    }
    println!("{} checks, {failed} above {DEFAULT_TOLERANCE:e}", reports.len());
    anyhow::ensure!(failed == 0, "gradient check failed");
    Ok(())
}

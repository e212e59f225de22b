//! Finite-difference check of every differentiable operation and of a tiny
//! network end to end, in f64.

use std::time::Instant;

use ricau::gradcheck::{full_suite, render_table};

fn main() -> anyhow::Result<()> {
    let start = Instant::now();
    let reports = full_suite(0)?;
    print!("{}", render_table(&reports));
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed, {:.1}s", reports.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(2);
    }
    Ok(())
}

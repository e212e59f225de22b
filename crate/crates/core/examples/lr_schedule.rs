//! Prints the warm-restart learning-rate schedule, one row per epoch.
//!
//! ```text
//! cargo run --example lr_schedule -- 0.5 1.5
//! ```
//! The optional arguments are the restart peak scale and the period multiplier.

use ricau::training::{lr_at, TrainConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = TrainConfig::default();
    if let Some(s) = args.next() {
        cfg.restart_lr_scale = s.parse()?;
    }
    if let Some(m) = args.next() {
        cfg.period_mult = m.parse()?;
    }
    cfg.validate()?;

    let peak = cfg.max_lr;
    println!("epoch\tlr");
    for e in 0..cfg.epochs {
        let lr = lr_at(e as f64, &cfg);
        let bar = "#".repeat((40.0 * lr / peak).round() as usize);
        println!("{e}\t{lr:.3e}\t{bar}");
    }
    Ok(())
}

//! Overfits a two-level network to eight phantom slices, each carrying all
//! four lesion classes, and reports training-set Dice.
//!
//! ```text
//! cargo run --release --example train_overfit -- 300
//! ```

use std::time::Instant;

use ricau::data::{generate_slices, AugmentConfig, Dataset, PhantomSpec};
use ricau::losses::{inverse_frequency_weights, LossConfig};
use ricau::network::{ArchConfig, RicauNet};
use ricau::training::{TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let spec = PhantomSpec {
        p_lesion: [1.0; 4],
        ..PhantomSpec::desk(8, 5)
    };
    let data = Dataset::from_samples(generate_slices(&spec)?);
    let loss = LossConfig {
        class_weights: inverse_frequency_weights(&data.class_counts()),
        ..LossConfig::default()
    };
    // one batch per epoch; a single warmup-then-cosine cycle over the run
    let cfg = TrainConfig {
        epochs: steps,
        batch_size: 8,
        init_lr: 1e-6,
        max_lr: 3e-3,
        warmup_epochs: 10.0,
        first_restart_epochs: steps as f64,
        ..TrainConfig::default()
    };
    let arch = ArchConfig::desk();
    let net = RicauNet::new(arch)?;
    println!("{} parameters", net.param_count());
    let mut trainer = Trainer::new(net, loss, cfg, AugmentConfig::disabled())?;

    let start = Instant::now();
    for chunk in 0..steps.div_ceil(50) {
        trainer.fit_until((chunk + 1) * 50, &data, None, None)?;
        let r = trainer.validate(&data)?;
        println!(
            "step {:>4}  loss {:.4}  foreground dice {:.3}  lesion dice {:.3?}  {:.0}s",
            trainer.epoch,
            trainer.step_losses.last().copied().unwrap_or(f64::NAN),
            r.mean_foreground(),
            r.lesion(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

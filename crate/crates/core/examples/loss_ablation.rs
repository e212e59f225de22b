//! Trains the same network under each loss variant and compares test Dice.
//!
//! ```text
//! cargo run --release --example loss_ablation -- 500 3
//! ```
//! Arguments: training slices, epochs.

use ricau::data::{generate_slices, AugmentConfig, Dataset, PhantomSpec};
use ricau::losses::{inverse_frequency_weights, LossConfig, LossVariant};
use ricau::network::{ArchConfig, RicauNet};
use ricau::training::{TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_train: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(500);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);

    let train = Dataset::from_samples(generate_slices(&PhantomSpec::desk(n_train, 1))?);
    let test = Dataset::from_samples(generate_slices(&PhantomSpec::desk(200, 2))?);
    let weights = inverse_frequency_weights(&train.class_counts());
    let cfg = TrainConfig {
        epochs,
        init_lr: 1e-6,
        max_lr: 2e-3,
        warmup_epochs: 1.0,
        first_restart_epochs: epochs as f64,
        ..TrainConfig::default()
    };

    println!("variant\tdice_lm\tdice_lad\tdice_lcx\tdice_rca\tmean_foreground");
    for variant in LossVariant::ALL {
        let loss = LossConfig {
            variant,
            class_weights: weights.clone(),
            ..LossConfig::default()
        };
        let mut t = Trainer::new(RicauNet::new(ArchConfig::desk())?, loss, cfg.clone(), AugmentConfig::disabled())?;
        t.fit(&train, None, None)?;
        let r = t.validate(&test)?;
        let d = r.lesion();
        println!(
            "{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}",
            variant.name(),
            d[0],
            d[1],
            d[2],
            d[3],
            r.mean_foreground()
        );
    }
    Ok(())
}

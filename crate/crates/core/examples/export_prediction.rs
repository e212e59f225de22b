//! Fits a few phantom slices, then writes predicted masks and color overlays.
//!
//! ```text
//! cargo run --release --example export_prediction -- /tmp/overlays
//! ```

use ricau::data::{collate, generate_slices, AugmentConfig, Dataset, PhantomSpec};
use ricau::evaluation::{dice_per_class, export_prediction};
use ricau::losses::{inverse_frequency_weights, LossConfig};
use ricau::network::{ArchConfig, RicauNet};
use ricau::training::{TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let dir = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "overlays".into()));
    let spec = PhantomSpec {
        p_lesion: [1.0; 4],
        ..PhantomSpec::desk(4, 11)
    };
    let data = Dataset::from_samples(generate_slices(&spec)?);
    let loss = LossConfig {
        class_weights: inverse_frequency_weights(&data.class_counts()),
        ..LossConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 4,
        init_lr: 1e-6,
        max_lr: 3e-3,
        warmup_epochs: 10.0,
        first_restart_epochs: 200.0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(RicauNet::new(ArchConfig::desk())?, loss, cfg, AugmentConfig::disabled())?;
    t.fit(&data, None, None)?;

    for (i, s) in data.samples.iter().enumerate() {
        let (x, _) = collate(std::slice::from_ref(s))?;
        let logits = t.net().predict(&t.store, &x)?;
        let out = export_prediction(&logits, &dir, &format!("slice_{i}"), true, Some(&s.image))?;
        let r = dice_per_class(&out.mask, &s.mask)?;
        println!(
            "{}  foreground dice {:.3}  overlay {}",
            out.mask_path.display(),
            r.mean_foreground(),
            out.overlay_path.as_ref().map_or("-".into(), |p| p.display().to_string())
        );
    }
    Ok(())
}

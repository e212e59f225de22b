use std::fs;
use std::path::Path;

use ricau::cli;
use ricau::data::{generate_slices, AugmentConfig, Dataset, PhantomSpec};
use ricau::losses::LossConfig;
use ricau::network::checkpoint::Checkpoint;
use ricau::network::{ArchConfig, RicauNet};
use ricau::training::{TrainConfig, Trainer, FINAL_CHECKPOINT, METRICS_FILE};

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("ricau").chain(args.iter().copied()))
}

fn tiny_trainer(epochs: usize) -> Trainer {
    let arch = ArchConfig {
        levels: 2,
        base_channels: 4,
        ..ArchConfig::default()
    };
    let cfg = TrainConfig {
        epochs,
        batch_size: 4,
        init_lr: 1e-5,
        max_lr: 1e-3,
        warmup_epochs: 1.0,
        first_restart_epochs: 3.0,
        seed: 5,
        ..TrainConfig::default()
    };
    let aug = AugmentConfig::default().scaled_to(32);
    Trainer::new(RicauNet::new(arch).unwrap(), LossConfig::default(), cfg, aug).unwrap()
}

fn tiny_data() -> Dataset {
    let spec = PhantomSpec {
        size: 32,
        lesion_pixel_range: [(2, 8); 4],
        p_lesion: [0.5; 4],
        ..PhantomSpec::desk(10, 3)
    };
    Dataset::from_samples(generate_slices(&spec).unwrap())
}

#[test]
fn phantom_lesion_rates_converge() {
    let n = 10_000;
    let spec = PhantomSpec::desk(n, 17);
    let data = Dataset::from_samples(generate_slices(&spec).unwrap());
    let present = data.slices_with_class();
    for (k, &p) in spec.p_lesion.iter().enumerate() {
        let rate = present[k + 2] as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((rate - p).abs() <= 3.0 * sigma, "class {}: rate {rate} vs {p} (3σ = {})", k + 2, 3.0 * sigma);
    }
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let mut straight = tiny_trainer(3);
    straight.fit(&data, Some(&data), None).unwrap();

    let mut first = tiny_trainer(3);
    first.fit_until(2, &data, Some(&data), Some(dir.path())).unwrap();
    let mut resumed = tiny_trainer(3);
    resumed.resume_from(dir.path()).unwrap();
    assert_eq!(resumed.epoch, 2);
    resumed.fit(&data, Some(&data), Some(dir.path())).unwrap();

    assert_eq!(
        Checkpoint::from_store(&straight.store).encode(),
        Checkpoint::from_store(&resumed.store).encode()
    );
    let log = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(run(&["gradcheck", "--out", out, "--set", "loss.variant=bogus"]), 1);
    assert_eq!(run(&["gradcheck", "--out", out, "--set", "train.epoch=3"]), 1);
    assert_eq!(run(&["gradcheck", "--out", out, "--set", "train.max_lr=-1"]), 1);
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["--help"]), 0);
    // a missing dataset is a runtime failure
    let missing = format!("data.dir={out}/nowhere");
    assert_eq!(run(&["train", "--out", out, "--set", &missing]), 2);
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["gradcheck", "--out", dir.path().to_str().unwrap()]), 0);
    let table = fs::read_to_string(dir.path().join("gradcheck.tsv")).unwrap();
    assert!(table.lines().count() > 10);
    assert!(!table.contains("FAIL"));
}

fn write_config(path: &Path, lines: &[&str]) {
    fs::write(path, lines.join("\n")).unwrap();
}

#[test]
fn commands_chain_and_resolved_config_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let cfg = root.join("run.cfg");
    write_config(
        &cfg,
        &[
            "# small end-to-end run",
            "seed = 3",
            "arch.base_channels = 4",
            "data.size = 32",
            "data.train_slices = 12",
            "data.val_slices = 4",
            "data.test_slices = 4",
            "data.p_lm = 0.5",
            "data.p_lad = 0.5",
            "data.p_lcx = 0.5",
            "data.p_rca = 0.5",
            "data.lesion_px_lm = 2,8",
            "data.lesion_px_lad = 2,8",
            "data.lesion_px_lcx = 2,8",
            "data.lesion_px_rca = 2,8",
            "data.crop_sizes = 19,25",
            "train.epochs = 2",
            "train.batch_size = 4",
            "train.first_restart_epochs = 2",
        ],
    );
    let c = cfg.to_str().unwrap();
    let set_dir = format!("data.dir={}", data.display());
    assert_eq!(run(&["synth", "--config", c, "--out", data.to_str().unwrap()]), 0);
    for split in cli::SPLITS {
        assert!(data.join(split).join("manifest.tsv").exists());
    }

    let a = root.join("a");
    let a_str = a.to_str().unwrap();
    assert_eq!(run(&["train", "--config", c, "--set", &set_dir, "--out", a_str]), 0);
    for f in [METRICS_FILE, FINAL_CHECKPOINT, "best.rckp", "state.rckp", "resolved-config"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(run(&["eval", "--config", c, "--set", &set_dir, "--out", a_str]), 0);
    let dice = fs::read_to_string(a.join("dice.tsv")).unwrap();
    assert!(dice.starts_with("mode\tdice_background"));

    assert_eq!(run(&["infer", "--config", c, "--set", &set_dir, "--out", a_str]), 0);
    let preds: Vec<_> = fs::read_dir(a.join("predictions")).unwrap().collect();
    assert_eq!(preds.len(), 8);

    assert_eq!(run(&["score", "--config", c, "--set", &set_dir, "--out", a_str]), 0);
    let score = fs::read_to_string(a.join("score.tsv")).unwrap();
    assert!(score.starts_with("vessel\tscore\nlm\t") && score.contains("\ntotal\t"));

    // rerun training from the emitted resolved config
    let b = root.join("b");
    let resolved = a.join("resolved-config");
    assert_eq!(run(&["train", "--config", resolved.to_str().unwrap(), "--out", b.to_str().unwrap()]), 0);
    for f in [METRICS_FILE, FINAL_CHECKPOINT] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_then_eval_overfits_eight_slices() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let overrides = [
        "data.train_slices=8",
        "data.val_slices=2",
        "data.test_slices=2",
        "data.p_lm=1",
        "data.p_lad=1",
        "data.p_lcx=1",
        "data.p_rca=1",
        "data.p_rotate=0",
        "data.p_crop=0",
        "data.p_blur=0",
        "data.p_noise=0",
        "data.p_salt_pepper=0",
        "train.epochs=300",
        "train.batch_size=8",
        "train.max_lr=3e-3",
        "train.warmup_epochs=10",
        "train.first_restart_epochs=300",
        "train.val_every=100",
        "eval.split=train",
    ];
    let mut args = Vec::new();
    for o in overrides {
        args.extend(["--set", o]);
    }
    let set_dir = format!("data.dir={}", data.display());
    let out = root.join("run");
    let final_ck = format!("eval.checkpoint={}", out.join(FINAL_CHECKPOINT).display());
    let with = |cmd: &'static str, extra: &[&str], out: &Path| {
        let mut a = vec![cmd, "--out", out.to_str().unwrap()];
        a.extend(args.iter().copied());
        a.extend(extra.iter().copied());
        run(&a)
    };
    assert_eq!(with("synth", &[], &data), 0);
    assert_eq!(with("train", &["--set", &set_dir], &out), 0);
    assert_eq!(with("eval", &["--set", &set_dir, "--set", &final_ck], &out), 0);
    let dice = fs::read_to_string(out.join("dice.tsv")).unwrap();
    let row: Vec<&str> = dice.lines().nth(1).unwrap().split('\t').collect();
    let foreground: f64 = row[7].parse().unwrap();
    assert!(foreground > 0.9, "{dice}");
}

//! Command-line surface.
//!
//! Exit status: 0 on success, 1 for invalid input (bad flags, config keys or
//! values, labels, shapes), 2 for failures at runtime (I/O, corrupt files,
//! divergence, failed gradient checks). Errors print with their kind prefix,
//! e.g. `config error: loss.variant: ...`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::Rng;

use crate::config::RunConfig;
use crate::data::{collate, generate_phantom, stream_rng, Dataset, PhantomSpec, SliceMeta, SliceSample};
use crate::error::{Error, Result};
use crate::evaluation::{agatston_per_lesion, evaluate_dataset, export_prediction, LesionScoreReport};
use crate::gradcheck::{ensure_all_passed, full_suite, render_table};
use crate::network::checkpoint::Checkpoint;
use crate::network::{ParameterStore, RicauNet};
use crate::tensor::{io as tns, Mask, Tensor};
use crate::training::{Trainer, BEST_CHECKPOINT};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
const SPLIT_STREAM: u64 = 0x5e;

#[derive(Debug, Parser)]
#[command(name = "ricau", version, about = "Coronary calcium segmentation with a coordinate-attention U-Net")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write train/val/test phantom splits under the output directory.
    Synth,
    /// Train on `data.dir/train`, validating on `data.dir/val`.
    Train,
    /// Dice of a checkpoint on `eval.split`, written to `dice.tsv`.
    Eval,
    /// Predicted masks and overlays for `eval.split` or `eval.image`.
    Infer,
    /// Finite-difference gradient checks, written to `gradcheck.tsv`.
    Gradcheck,
    /// Per-vessel calcium scores, written to `score.tsv`.
    Score,
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match RunConfig::load(cli.config.as_deref(), &cli.set).and_then(|cfg| execute(cli.command, &cfg, &cli.out)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

/// Runs one command against a resolved configuration.
pub fn execute(command: Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.write_resolved(out)?;
    match command {
        Command::Synth => synth(cfg, out),
        Command::Train => train(cfg, out),
        Command::Eval => eval(cfg, out),
        Command::Infer => infer(cfg, out),
        Command::Gradcheck => gradcheck(cfg, out),
        Command::Score => score(cfg, out),
    }
}

/// Phantom seed of split `index` under the master seed.
pub fn split_seed(seed: u64, index: usize) -> u64 {
    stream_rng(seed, &[SPLIT_STREAM, index as u64]).gen()
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let counts = [cfg.data.train_slices, cfg.data.val_slices, cfg.data.test_slices];
    for (i, (split, n)) in SPLITS.iter().zip(counts).enumerate() {
        let spec = PhantomSpec {
            slices: n,
            seed: split_seed(cfg.seed, i),
            ..cfg.data.phantom.clone()
        };
        let rows = generate_phantom(&spec, out.join(split))?;
        let mut totals = [0u64; 6];
        for r in &rows {
            for (t, c) in totals.iter_mut().zip(r.counts) {
                *t += c;
            }
        }
        println!("{split}\t{n} slices\tclass pixels {totals:?}");
    }
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let train = Dataset::load(cfg.split_dir("train"))?;
    let val = Dataset::load(cfg.split_dir("val"))?;
    let loss = cfg.loss_config(&train.class_counts());
    let net = RicauNet::new(cfg.arch.clone())?;
    let mut trainer = Trainer::new(net, loss, cfg.train.clone(), cfg.data.augment.clone())?;
    if cfg.resume {
        trainer.resume_from(out)?;
        println!("resumed at epoch {}", trainer.epoch);
    }
    trainer.fit(&train, Some(&val), Some(out))?;
    for r in &trainer.history {
        println!("{}", r.tsv_row());
    }
    if let Some((score, epoch)) = trainer.best {
        println!("best mean lesion dice {score:.4} at epoch {epoch}");
    }
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    if cfg.eval.checkpoint.is_empty() {
        out.join(BEST_CHECKPOINT)
    } else {
        PathBuf::from(&cfg.eval.checkpoint)
    }
}

fn load_model(cfg: &RunConfig, out: &Path) -> Result<(RicauNet, ParameterStore<f32>)> {
    let net = RicauNet::new(cfg.arch.clone())?;
    let mut store = net.init_store::<f32>(0)?;
    Checkpoint::load(checkpoint_path(cfg, out))?.load_into(&mut store)?;
    Ok((net, store))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (net, store) = load_model(cfg, out)?;
    let data = Dataset::load(cfg.split_dir(&cfg.eval.split))?;
    let report = evaluate_dataset(&net, &store, &data.samples, cfg.train.batch_size, cfg.eval.dice_mode)?;
    let text = report.to_tsv();
    write_text(&out.join("dice.tsv"), &text)?;
    print!("{text}");
    Ok(())
}

fn load_image(path: &str) -> Result<Tensor<f32>> {
    let t = tns::load(path)?.into_f32()?;
    match *t.dims() {
        [h, w] | [1, h, w] => Tensor::new(vec![1, h, w], t.into_data()),
        _ => Err(Error::dim(format!("{path}: expected [H, W] or [1, H, W], got {:?}", t.dims()))),
    }
}

fn load_mask(path: &str) -> Result<Mask> {
    let m = tns::load(path)?.into_mask()?;
    match *m.dims() {
        [h, w] | [1, h, w] => Mask::new(vec![h, w], m.data().to_vec()),
        _ => Err(Error::dim(format!("{path}: expected [H, W] or [1, H, W], got {:?}", m.dims()))),
    }
}

/// Single-slice input from `eval.image` (and `eval.mask`, if given).
fn single_slice(cfg: &RunConfig) -> Result<SliceSample> {
    let image = load_image(&cfg.eval.image)?;
    let (h, w) = (image.dims()[1], image.dims()[2]);
    let mask = if cfg.eval.mask.is_empty() {
        Mask::new(vec![h, w], vec![0; h * w])?
    } else {
        load_mask(&cfg.eval.mask)?
    };
    let stem = Path::new(&cfg.eval.image)
        .file_stem()
        .map_or_else(|| "slice".to_string(), |s| s.to_string_lossy().into_owned());
    SliceSample::new(
        image,
        mask,
        SliceMeta {
            slice_id: stem,
            source_id: cfg.eval.image.clone(),
        },
    )
}

fn inputs(cfg: &RunConfig) -> Result<Vec<SliceSample>> {
    if cfg.eval.image.is_empty() {
        Ok(Dataset::load(cfg.split_dir(&cfg.eval.split))?.samples)
    } else {
        Ok(vec![single_slice(cfg)?])
    }
}

fn infer(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (net, store) = load_model(cfg, out)?;
    let dir = out.join("predictions");
    let samples = inputs(cfg)?;
    for (i, s) in samples.iter().enumerate() {
        let (x, _) = collate(std::slice::from_ref(s))?;
        let logits = net.predict(&store, &x)?;
        let stem = if s.meta.slice_id.is_empty() {
            format!("slice_{i:05}")
        } else {
            s.meta.slice_id.clone()
        };
        export_prediction(&logits, &dir, &stem, cfg.eval.overlay, Some(&s.image))?;
    }
    println!("wrote {} predictions to {}", samples.len(), dir.display());
    Ok(())
}

fn gradcheck(cfg: &RunConfig, out: &Path) -> Result<()> {
    let reports = full_suite(cfg.seed)?;
    let table = render_table(&reports);
    write_text(&out.join("gradcheck.tsv"), &table)?;
    print!("{table}");
    ensure_all_passed(&reports)
}

fn score(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut total = LesionScoreReport::default();
    for s in inputs(cfg)? {
        let r = agatston_per_lesion(&s.mask, &s.image, cfg.eval.pixel_area_mm2)?;
        for (t, v) in total.scores.iter_mut().zip(r.scores) {
            *t += v;
        }
        total.total += r.total;
    }
    let text = total.to_tsv();
    write_text(&out.join("score.tsv"), &text)?;
    print!("{text}");
    Ok(())
}

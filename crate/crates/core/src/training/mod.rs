//! Optimizer, learning-rate schedule and the training loop.

mod adam;

pub use adam::{adam_step, gradients, AdamConfig, Gradients, OptimizerState};

use std::f64::consts::PI;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::{augment, augment_rng, collate, stream_rng, AugmentConfig, Dataset, SliceSample};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_dataset, DiceMode, DiceReport};
use crate::losses::{self, LossConfig};
use crate::network::checkpoint::Checkpoint;
use crate::network::{ParameterStore, RicauNet};
use crate::tensor::{Graph, Tensor};

const INIT_STREAM: u64 = 0x11;
const SHUFFLE_STREAM: u64 = 0x5f;

pub const METRICS_HEADER: &str = "epoch\tlr\ttrain_loss\tdice_lm\tdice_lad\tdice_lcx\tdice_rca";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const BEST_CHECKPOINT: &str = "best.rckp";
pub const FINAL_CHECKPOINT: &str = "final.rckp";
pub const STATE_CHECKPOINT: &str = "state.rckp";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub init_lr: f64,
    pub max_lr: f64,
    pub first_restart_epochs: f64,
    /// Warmup length at the start of every cycle.
    pub warmup_epochs: f64,
    /// Peak multiplier applied at each restart.
    pub restart_lr_scale: f64,
    /// Cycle length multiplier after each restart; 1 keeps the period fixed.
    pub period_mult: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Validate every this many epochs (the last epoch is always validated).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            init_lr: 1e-12,
            max_lr: 1e-4,
            first_restart_epochs: 50.0,
            warmup_epochs: 5.0,
            restart_lr_scale: 0.5,
            period_mult: 1.0,
            adam: AdamConfig::default(),
            seed: 0,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.init_lr > 0.0 && self.init_lr <= self.max_lr && self.max_lr.is_finite()) {
            return Err(Error::config("train.init_lr", "need 0 < init_lr <= max_lr"));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.first_restart_epochs) {
            return Err(Error::config("train.warmup_epochs", "need 0 <= warmup_epochs < first_restart_epochs"));
        }
        if !(self.restart_lr_scale > 0.0 && self.restart_lr_scale <= 1.0) {
            return Err(Error::config("train.restart_lr_scale", "must lie in (0, 1]"));
        }
        if !(self.period_mult >= 1.0 && self.period_mult.is_finite()) {
            return Err(Error::config("train.period_mult", "must be at least 1"));
        }
        if self.val_every == 0 {
            return Err(Error::config("train.val_every", "must be at least 1"));
        }
        self.adam.validate()
    }
}

/// Learning rate at a (fractional) epoch: per cycle, a linear warmup from
/// `init_lr` to the cycle peak, then cosine decay back to `init_lr`.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> f64 {
    let epoch = epoch.max(0.0);
    let (mut start, mut period, mut peak) = (0.0, cfg.first_restart_epochs, cfg.max_lr);
    while epoch >= start + period {
        start += period;
        period *= cfg.period_mult;
        peak *= cfg.restart_lr_scale;
    }
    let pos = epoch - start;
    let c = if pos < cfg.warmup_epochs {
        pos / cfg.warmup_epochs
    } else {
        let t = (pos - cfg.warmup_epochs) / (period - cfg.warmup_epochs);
        0.5 * (1.0 + (PI * t).cos())
    };
    peak * c + cfg.init_lr * (1.0 - c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// LM, LAD, LCX, RCA; `None` when the epoch was not validated.
    pub dice: Option<[f64; 4]>,
}

impl EpochRecord {
    pub fn tsv_row(&self) -> String {
        let dice = match self.dice {
            Some(d) => d.map(|v| format!("{v:.6}")).join("\t"),
            None => ["-"; 4].join("\t"),
        };
        format!("{}\t{}\t{:.6}\t{dice}", self.epoch, self.lr, self.train_loss)
    }
}

/// Model, optimizer and bookkeeping for one training run.
pub struct Trainer {
    net: RicauNet,
    pub store: ParameterStore<f32>,
    pub optimizer: OptimizerState,
    pub loss: LossConfig,
    pub cfg: TrainConfig,
    pub augment: AugmentConfig,
    /// Epochs completed so far.
    pub epoch: usize,
    /// Best validation score (mean lesion Dice) and its epoch.
    pub best: Option<(f32, usize)>,
    pub history: Vec<EpochRecord>,
    /// Loss of every optimizer step taken by this instance.
    pub step_losses: Vec<f64>,
}

impl Trainer {
    pub fn new(net: RicauNet, loss: LossConfig, cfg: TrainConfig, augment: AugmentConfig) -> Result<Self> {
        loss.validate()?;
        cfg.validate()?;
        augment.validate()?;
        let mut init = stream_rng(cfg.seed, &[INIT_STREAM]);
        let store = net.init_store::<f32>(rand::Rng::gen(&mut init))?;
        let optimizer = OptimizerState::new(&store, cfg.adam);
        Ok(Self {
            net,
            store,
            optimizer,
            loss,
            cfg,
            augment,
            epoch: 0,
            best: None,
            history: Vec::new(),
            step_losses: Vec::new(),
        })
    }

    pub fn net(&self) -> &RicauNet {
        &self.net
    }

    /// One optimizer step on an already augmented batch of raw slices.
    pub fn step(&mut self, batch: &[SliceSample], lr: f64, batch_index: usize) -> Result<f64> {
        let epoch = self.epoch;
        let diverged = || Error::Diverged {
            epoch,
            batch: batch_index,
            lr,
        };
        let (x, target) = collate(batch)?;
        let mut g = Graph::<f32>::new();
        let (logits, bound) = match self.net.forward_train(&mut g, &mut self.store, x) {
            Err(Error::NonFinite(_)) => return Err(diverged()),
            other => other?,
        };
        let loss = losses::loss(&mut g, logits, &target, &self.loss)?;
        let value = f64::from(g.value(loss).data()[0]);
        if !value.is_finite() {
            return Err(diverged());
        }
        g.backward(loss)?;
        let grads = gradients(&g, &bound);
        adam_step(&mut self.store, &grads, &mut self.optimizer, lr)?;
        self.step_losses.push(value);
        Ok(value)
    }

    /// Batches of sample indices for `epoch`, shuffled deterministically.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream_rng(self.cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        idx.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Trains one epoch and returns the mean batch loss.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Format("training set is empty".into()));
        }
        let batches = self.epoch_order(data.len(), self.epoch);
        let nb = batches.len();
        let mut total = 0.0;
        for (b, ids) in batches.iter().enumerate() {
            let lr = lr_at(self.epoch as f64 + b as f64 / nb as f64, &self.cfg);
            let batch = ids
                .iter()
                .map(|&i| {
                    let mut rng = augment_rng(self.cfg.seed, i as u64, self.epoch as u64);
                    augment(&data.samples[i], &self.augment, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            total += self.step(&batch, lr, b)?;
        }
        Ok(total / nb as f64)
    }

    pub fn validate(&self, data: &Dataset) -> Result<DiceReport> {
        evaluate_dataset(&self.net, &self.store, &data.samples, self.cfg.batch_size, DiceMode::Global)
    }

    /// Runs until `cfg.epochs` are complete. With `out`, appends to the
    /// metrics log and keeps best, final and resumable state checkpoints.
    pub fn fit(&mut self, train: &Dataset, val: Option<&Dataset>, out: Option<&Path>) -> Result<()> {
        self.fit_until(self.cfg.epochs, train, val, out)
    }

    /// Like [`Trainer::fit`] but stops after epoch `stop` (exclusive).
    pub fn fit_until(&mut self, stop: usize, train: &Dataset, val: Option<&Dataset>, out: Option<&Path>) -> Result<()> {
        let stop = stop.min(self.cfg.epochs);
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            if self.epoch == 0 {
                let p = dir.join(METRICS_FILE);
                fs::write(&p, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&p, e))?;
            }
        }
        while self.epoch < stop {
            let lr = lr_at(self.epoch as f64, &self.cfg);
            let train_loss = self.train_epoch(train)?;
            let last = self.epoch + 1 == self.cfg.epochs;
            let report = match val {
                Some(v) if last || (self.epoch + 1) % self.cfg.val_every == 0 => Some(self.validate(v)?),
                _ => None,
            };
            let record = EpochRecord {
                epoch: self.epoch,
                lr,
                train_loss,
                dice: report.as_ref().map(DiceReport::lesion),
            };
            let improved = match &report {
                Some(r) => {
                    let score = r.mean_lesion() as f32;
                    let better = self.best.map_or(true, |(b, _)| score > b);
                    if better {
                        self.best = Some((score, self.epoch));
                    }
                    better
                }
                None => false,
            };
            self.epoch += 1;
            if let Some(dir) = out {
                append_line(&dir.join(METRICS_FILE), &record.tsv_row())?;
                if improved {
                    Checkpoint::from_store(&self.store).save(dir.join(BEST_CHECKPOINT))?;
                }
                self.state_checkpoint().save(dir.join(STATE_CHECKPOINT))?;
                if self.epoch == self.cfg.epochs {
                    Checkpoint::from_store(&self.store).save(dir.join(FINAL_CHECKPOINT))?;
                }
            }
            self.history.push(record);
        }
        Ok(())
    }

    /// Parameters, running moments, Adam moments and progress counters.
    pub fn state_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store);
        for (k, t) in &self.optimizer.m {
            ck.insert(format!("adam.m.{k}"), t.clone());
        }
        for (k, t) in &self.optimizer.v {
            ck.insert(format!("adam.v.{k}"), t.clone());
        }
        let (best_score, best_epoch) = self.best.map_or((f32::NAN, -1.0), |(s, e)| (s, e as f32));
        let counters = [self.optimizer.step as f32, self.epoch as f32, best_score, best_epoch];
        ck.insert("trainer.counters", Tensor::new(vec![4], counters.to_vec()).expect("4 values"));
        ck
    }

    /// Restores everything written by [`Trainer::state_checkpoint`].
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_into(&mut self.store)?;
        for (prefix, table) in [("adam.m.", &mut self.optimizer.m), ("adam.v.", &mut self.optimizer.v)] {
            for (k, t) in table.iter_mut() {
                let src = ck.get(&format!("{prefix}{k}"))?;
                if src.dims() != t.dims() {
                    return Err(Error::Format(format!("{prefix}{k}: dims {:?} vs {:?}", src.dims(), t.dims())));
                }
                t.data_mut().copy_from_slice(src.data());
            }
        }
        let c = ck.get("trainer.counters")?;
        if c.len() != 4 {
            return Err(Error::Format("trainer.counters must hold 4 values".into()));
        }
        let c = c.data();
        self.optimizer.step = c[0] as u64;
        self.epoch = c[1] as usize;
        self.best = (c[3] >= 0.0).then(|| (c[2], c[3] as usize));
        Ok(())
    }

    /// Continues from `dir/state.rckp`.
    pub fn resume_from(&mut self, dir: &Path) -> Result<()> {
        self.restore(&Checkpoint::load(dir.join(STATE_CHECKPOINT))?)
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Reads the `lr` column back from a metrics log.
pub fn read_lr_column(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .map(|l| {
            l.split('\t')
                .nth(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad metrics row `{l}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0.0, &cfg), 1e-12);
        assert_eq!(lr_at(5.0, &cfg), 1e-4);
        assert_eq!(lr_at(50.0, &cfg), 1e-12);
        assert_eq!(lr_at(55.0, &cfg), 5e-5);
        assert_eq!(lr_at(105.0, &cfg), 2.5e-5);
    }

    #[test]
    fn schedule_is_continuous_inside_cycles() {
        let cfg = TrainConfig::default();
        let mut prev = lr_at(0.0, &cfg);
        for i in 1..5000 {
            let e = i as f64 * 0.01;
            let lr = lr_at(e, &cfg);
            assert!((lr - prev).abs() < 1e-6, "jump at {e}");
            prev = lr;
        }
    }

    #[test]
    fn period_multiplier_stretches_cycles() {
        let cfg = TrainConfig {
            period_mult: 2.0,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(150.0, &cfg), 1e-12);
        assert_eq!(lr_at(155.0, &cfg), 2.5e-5);
        assert_eq!(lr_at(55.0, &cfg), 5e-5);
    }

    #[test]
    fn rejects_inverted_lr() {
        let cfg = TrainConfig {
            init_lr: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }
}

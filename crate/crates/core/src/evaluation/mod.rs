//! Per-class Dice, per-vessel calcium scoring and prediction export.

mod agatston;
mod export;

pub use agatston::{agatston_per_lesion, density_weight, LesionScoreReport, MIN_COMPONENT_AREA_MM2};
pub use export::{argmax_mask, export_prediction, write_ppm, ExportedPrediction, PALETTE};

use std::fmt::Write as _;

use crate::data::{collate, SliceSample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::network::{ParameterStore, RicauNet};
use crate::tensor::Mask;

const C: usize = CLASS_NAMES.len();

/// How per-class counts are combined across slices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DiceMode {
    /// Pool intersections and sizes over every slice, then divide once.
    #[default]
    Global,
    /// Mean of per-slice Dice over the slices where the class occurs in
    /// either mask.
    PerSlice,
}

impl DiceMode {
    pub fn name(self) -> &'static str {
        match self {
            DiceMode::Global => "global",
            DiceMode::PerSlice => "per_slice",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(DiceMode::Global),
            "per_slice" => Ok(DiceMode::PerSlice),
            _ => Err(Error::config("eval.dice_mode", format!("unknown mode `{s}`; valid modes: global, per_slice"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    pub mode: DiceMode,
    pub dice: [f64; C],
    /// Set where the class never appears in prediction or target; its Dice is 1.
    pub absent: [bool; C],
    pub pred_counts: [u64; C],
    pub true_counts: [u64; C],
    pub intersections: [u64; C],
}

impl DiceReport {
    /// Mean over classes 1..=5.
    pub fn mean_foreground(&self) -> f64 {
        self.dice[1..].iter().sum::<f64>() / (C - 1) as f64
    }

    /// Mean over the lesion classes 2..=5.
    pub fn mean_lesion(&self) -> f64 {
        self.dice[2..].iter().sum::<f64>() / (C - 2) as f64
    }

    /// `(dice_lm, dice_lad, dice_lcx, dice_rca)`.
    pub fn lesion(&self) -> [f64; 4] {
        [self.dice[2], self.dice[3], self.dice[4], self.dice[5]]
    }

    /// Header row plus one row of values.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("mode");
        for c in CLASS_NAMES {
            write!(s, "\tdice_{c}").expect("string write");
        }
        s.push_str("\tmean_foreground\tmean_lesion\tabsent\n");
        s.push_str(self.mode.name());
        for d in self.dice {
            write!(s, "\t{d:.6}").expect("string write");
        }
        let absent: Vec<&str> = (0..C).filter(|&c| self.absent[c]).map(|c| CLASS_NAMES[c]).collect();
        let absent = if absent.is_empty() { "-".to_string() } else { absent.join(",") };
        writeln!(s, "\t{:.6}\t{:.6}\t{absent}", self.mean_foreground(), self.mean_lesion()).expect("string write");
        s
    }
}

/// Streams mask pairs slice by slice and reports in either mode.
#[derive(Clone, Debug, Default)]
pub struct DiceAccumulator {
    inter: [u64; C],
    pred: [u64; C],
    truth: [u64; C],
    slice_sum: [f64; C],
    slice_hits: [u64; C],
}

impl DiceAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `[H, W]` or `[N, H, W]` masks of equal shape.
    pub fn add(&mut self, pred: &Mask, truth: &Mask) -> Result<()> {
        if pred.dims() != truth.dims() {
            return Err(Error::dim(format!(
                "prediction {:?} and target {:?} differ in shape",
                pred.dims(),
                truth.dims()
            )));
        }
        pred.validate(C)?;
        truth.validate(C)?;
        let (h, w) = pred.spatial();
        let hw = h * w;
        for n in 0..pred.batch() {
            let mut inter = [0u64; C];
            let mut p = [0u64; C];
            let mut t = [0u64; C];
            let range = n * hw..(n + 1) * hw;
            for (&a, &b) in pred.data()[range.clone()].iter().zip(&truth.data()[range]) {
                p[a as usize] += 1;
                t[b as usize] += 1;
                if a == b {
                    inter[a as usize] += 1;
                }
            }
            for c in 0..C {
                self.inter[c] += inter[c];
                self.pred[c] += p[c];
                self.truth[c] += t[c];
                if p[c] + t[c] > 0 {
                    self.slice_sum[c] += 2.0 * inter[c] as f64 / (p[c] + t[c]) as f64;
                    self.slice_hits[c] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn report(&self, mode: DiceMode) -> DiceReport {
        let mut dice = [1.0; C];
        let mut absent = [false; C];
        for c in 0..C {
            let denom = self.pred[c] + self.truth[c];
            if denom == 0 {
                absent[c] = true;
                continue;
            }
            dice[c] = match mode {
                DiceMode::Global => 2.0 * self.inter[c] as f64 / denom as f64,
                DiceMode::PerSlice => self.slice_sum[c] / self.slice_hits[c] as f64,
            };
        }
        DiceReport {
            mode,
            dice,
            absent,
            pred_counts: self.pred,
            true_counts: self.truth,
            intersections: self.inter,
        }
    }
}

/// Global-count Dice of one mask pair.
pub fn dice_per_class(pred: &Mask, truth: &Mask) -> Result<DiceReport> {
    let mut acc = DiceAccumulator::new();
    acc.add(pred, truth)?;
    Ok(acc.report(DiceMode::Global))
}

/// Eval-mode predictions for `samples`, `batch_size` slices per forward pass.
pub fn predict_masks(
    net: &RicauNet,
    store: &ParameterStore<f32>,
    samples: &[SliceSample],
    batch_size: usize,
) -> Result<Vec<Mask>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let (x, _) = collate(chunk)?;
        let pred = argmax_mask(&net.predict(store, &x)?)?;
        let (h, w) = pred.spatial();
        for slice in pred.data().chunks(h * w) {
            out.push(Mask::new(vec![h, w], slice.to_vec())?);
        }
    }
    Ok(out)
}

/// Dice of eval-mode predictions against the stored masks.
pub fn evaluate_dataset(
    net: &RicauNet,
    store: &ParameterStore<f32>,
    samples: &[SliceSample],
    batch_size: usize,
    mode: DiceMode,
) -> Result<DiceReport> {
    let mut acc = DiceAccumulator::new();
    for (pred, s) in predict_masks(net, store, samples, batch_size)?.iter().zip(samples) {
        acc.add(pred, &s.mask)?;
    }
    Ok(acc.report(mode))
}

//! Flat `key = value` run configuration.
//!
//! Files hold one `key = value` pair per line; `#` starts a comment. The
//! `preset` key picks the defaults bundle and is applied first; every other key
//! is applied in order, file lines first, then `--set` overrides, so the last
//! assignment of a key wins.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{AugmentConfig, PhantomSpec};
use crate::error::{Error, Result};
use crate::evaluation::DiceMode;
use crate::layers::Activation;
use crate::losses::{LossConfig, LossVariant};
use crate::network::ArchConfig;
use crate::training::TrainConfig;

pub const RESOLVED_CONFIG_FILE: &str = "resolved-config";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Preset {
    /// 64×64 slices, a two-level network and a short schedule.
    #[default]
    Desk,
    /// 512×512 slices, four levels, 64 base channels, 100 epochs.
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::config("preset", format!("unknown preset `{s}`; valid presets: desk, paper"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClassWeights {
    /// Inverse pixel frequency of the training manifest, mean 1.
    Auto,
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Root holding `train/`, `val/` and `test/` dataset directories.
    pub dir: PathBuf,
    pub train_slices: usize,
    pub val_slices: usize,
    pub test_slices: usize,
    /// Phantom parameters; `slices` and `seed` are set per split.
    pub phantom: PhantomSpec,
    pub augment: AugmentConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub checkpoint: String,
    pub split: String,
    pub dice_mode: DiceMode,
    pub pixel_area_mm2: f64,
    pub overlay: bool,
    /// Single-slice inputs for `score`; empty means score the whole split.
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub class_weights: ClassWeights,
    pub train: TrainConfig,
    pub resume: bool,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

/// Desk-scale schedule used by the `desk` preset.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 16,
        init_lr: 1e-6,
        max_lr: 2e-3,
        first_restart_epochs: 5.0,
        warmup_epochs: 1.0,
        ..TrainConfig::default()
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (arch, train, phantom, augment, area, counts) = match preset {
            Preset::Desk => (
                ArchConfig::desk(),
                desk_train_config(),
                PhantomSpec::desk(0, 0),
                AugmentConfig::default().scaled_to(64),
                31.36,
                (2000, 250, 500),
            ),
            Preset::Paper => (
                ArchConfig::default(),
                TrainConfig::default(),
                PhantomSpec {
                    slices: 0,
                    ..PhantomSpec::default()
                },
                AugmentConfig::default(),
                0.49,
                (1000, 200, 200),
            ),
        };
        Self {
            seed: 0,
            preset,
            arch,
            loss: LossConfig::default(),
            class_weights: ClassWeights::Auto,
            train,
            resume: false,
            data: DataConfig {
                dir: PathBuf::from("data"),
                train_slices: counts.0,
                val_slices: counts.1,
                test_slices: counts.2,
                phantom,
                augment,
            },
            eval: EvalConfig {
                checkpoint: String::new(),
                split: "test".into(),
                dice_mode: DiceMode::Global,
                pixel_area_mm2: area,
                overlay: true,
                image: String::new(),
                mask: String::new(),
            },
        }
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.arch;
        let l = &self.loss;
        let t = &self.train;
        let d = &self.data;
        let p = &d.phantom;
        let g = &d.augment;
        let e = &self.eval;
        let weights = match &self.class_weights {
            ClassWeights::Auto => "auto".to_string(),
            ClassWeights::Fixed(w) => join(w),
        };
        let mut v = vec![
            ("preset", self.preset.name().to_string()),
            ("seed", self.seed.to_string()),
            ("arch.levels", a.levels.to_string()),
            ("arch.base_channels", a.base_channels.to_string()),
            ("arch.ca_enabled", a.ca_enabled.to_string()),
            ("arch.ca_reduction", a.ca.reduction_ratio.to_string()),
            ("arch.ca_min_channels", a.ca.min_mid_channels.to_string()),
            ("arch.ca_activation", a.ca.activation.name().to_string()),
            ("loss.variant", l.variant.name().to_string()),
            ("loss.w_focal", l.w_focal.to_string()),
            ("loss.w_dice", l.w_dice.to_string()),
            ("loss.focal_gamma", l.focal_gamma.to_string()),
            ("loss.dice_gamma", l.dice_gamma.to_string()),
            ("loss.smooth_eps", l.smooth_eps.to_string()),
            ("loss.class_weights", weights),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.init_lr", t.init_lr.to_string()),
            ("train.max_lr", t.max_lr.to_string()),
            ("train.first_restart_epochs", t.first_restart_epochs.to_string()),
            ("train.warmup_epochs", t.warmup_epochs.to_string()),
            ("train.restart_lr_scale", t.restart_lr_scale.to_string()),
            ("train.period_mult", t.period_mult.to_string()),
            ("train.adam_beta1", t.adam.beta1.to_string()),
            ("train.adam_beta2", t.adam.beta2.to_string()),
            ("train.adam_eps", t.adam.eps.to_string()),
            ("train.val_every", t.val_every.to_string()),
            ("train.resume", self.resume.to_string()),
            ("data.dir", d.dir.display().to_string()),
            ("data.train_slices", d.train_slices.to_string()),
            ("data.val_slices", d.val_slices.to_string()),
            ("data.test_slices", d.test_slices.to_string()),
            ("data.size", p.size.to_string()),
        ];
        for (i, name) in VESSELS.iter().enumerate() {
            v.push((P_KEYS[i], p.p_lesion[i].to_string()));
            let (lo, hi) = p.lesion_pixel_range[i];
            v.push((PX_KEYS[i], format!("{lo},{hi}")));
            debug_assert!(P_KEYS[i].ends_with(name));
        }
        v.extend([
            ("data.hu_cac", format!("{},{}", p.hu_range_cac.0, p.hu_range_cac.1)),
            ("data.hu_bone", format!("{},{}", p.hu_range_bone.0, p.hu_range_bone.1)),
            ("data.hu_background", p.hu_background.to_string()),
            ("data.p_rotate", g.p_rotate.to_string()),
            ("data.p_crop", g.p_crop.to_string()),
            ("data.p_blur", g.p_blur.to_string()),
            ("data.p_noise", g.p_noise.to_string()),
            ("data.p_salt_pepper", g.p_salt_pepper.to_string()),
            ("data.rotation_degrees", join(&g.rotation_degrees)),
            ("data.crop_sizes", join(&g.crop_sizes)),
            ("data.blur_sigma", format!("{},{}", g.blur_sigma.0, g.blur_sigma.1)),
            ("data.noise_sigma", g.noise_sigma.to_string()),
            ("data.salt_pepper_rate", g.salt_pepper_rate.to_string()),
            ("eval.checkpoint", e.checkpoint.clone()),
            ("eval.split", e.split.clone()),
            ("eval.dice_mode", e.dice_mode.name().to_string()),
            ("eval.pixel_area_mm2", e.pixel_area_mm2.to_string()),
            ("eval.overlay", e.overlay.to_string()),
            ("eval.image", e.image.clone()),
            ("eval.mask", e.mask.clone()),
        ]);
        v
    }

    /// All recognized keys.
    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Assigns one key. `preset` is rejected here; it is handled by
    /// [`RunConfig::from_pairs`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "arch.levels" => self.arch.levels = num(key, v)?,
            "arch.base_channels" => self.arch.base_channels = num(key, v)?,
            "arch.ca_enabled" => self.arch.ca_enabled = flag(key, v)?,
            "arch.ca_reduction" => self.arch.ca.reduction_ratio = num(key, v)?,
            "arch.ca_min_channels" => self.arch.ca.min_mid_channels = num(key, v)?,
            "arch.ca_activation" => {
                self.arch.ca.activation = Activation::parse(v)
                    .ok_or_else(|| Error::config(key, format!("unknown activation `{v}`; valid: relu, hardswish")))?
            }
            "loss.variant" => self.loss.variant = LossVariant::parse(v)?,
            "loss.w_focal" => self.loss.w_focal = num(key, v)?,
            "loss.w_dice" => self.loss.w_dice = num(key, v)?,
            "loss.focal_gamma" => self.loss.focal_gamma = num(key, v)?,
            "loss.dice_gamma" => self.loss.dice_gamma = num(key, v)?,
            "loss.smooth_eps" => self.loss.smooth_eps = num(key, v)?,
            "loss.class_weights" => {
                self.class_weights = if v == "auto" {
                    ClassWeights::Auto
                } else {
                    ClassWeights::Fixed(list(key, v)?)
                }
            }
            "train.epochs" => self.train.epochs = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.init_lr" => self.train.init_lr = num(key, v)?,
            "train.max_lr" => self.train.max_lr = num(key, v)?,
            "train.first_restart_epochs" => self.train.first_restart_epochs = num(key, v)?,
            "train.warmup_epochs" => self.train.warmup_epochs = num(key, v)?,
            "train.restart_lr_scale" => self.train.restart_lr_scale = num(key, v)?,
            "train.period_mult" => self.train.period_mult = num(key, v)?,
            "train.adam_beta1" => self.train.adam.beta1 = num(key, v)?,
            "train.adam_beta2" => self.train.adam.beta2 = num(key, v)?,
            "train.adam_eps" => self.train.adam.eps = num(key, v)?,
            "train.val_every" => self.train.val_every = num(key, v)?,
            "train.resume" => self.resume = flag(key, v)?,
            "data.dir" => self.data.dir = PathBuf::from(v),
            "data.train_slices" => self.data.train_slices = num(key, v)?,
            "data.val_slices" => self.data.val_slices = num(key, v)?,
            "data.test_slices" => self.data.test_slices = num(key, v)?,
            "data.size" => self.data.phantom.size = num(key, v)?,
            "data.hu_cac" => self.data.phantom.hu_range_cac = pair(key, v)?,
            "data.hu_bone" => self.data.phantom.hu_range_bone = pair(key, v)?,
            "data.hu_background" => self.data.phantom.hu_background = num(key, v)?,
            "data.p_rotate" => self.data.augment.p_rotate = num(key, v)?,
            "data.p_crop" => self.data.augment.p_crop = num(key, v)?,
            "data.p_blur" => self.data.augment.p_blur = num(key, v)?,
            "data.p_noise" => self.data.augment.p_noise = num(key, v)?,
            "data.p_salt_pepper" => self.data.augment.p_salt_pepper = num(key, v)?,
            "data.rotation_degrees" => self.data.augment.rotation_degrees = list(key, v)?,
            "data.crop_sizes" => self.data.augment.crop_sizes = list(key, v)?,
            "data.blur_sigma" => self.data.augment.blur_sigma = pair(key, v)?,
            "data.noise_sigma" => self.data.augment.noise_sigma = num(key, v)?,
            "data.salt_pepper_rate" => self.data.augment.salt_pepper_rate = num(key, v)?,
            "eval.checkpoint" => self.eval.checkpoint = v.to_string(),
            "eval.split" => self.eval.split = v.to_string(),
            "eval.dice_mode" => self.eval.dice_mode = DiceMode::parse(v)?,
            "eval.pixel_area_mm2" => self.eval.pixel_area_mm2 = num(key, v)?,
            "eval.overlay" => self.eval.overlay = flag(key, v)?,
            "eval.image" => self.eval.image = v.to_string(),
            "eval.mask" => self.eval.mask = v.to_string(),
            _ => {
                if let Some(i) = P_KEYS.iter().position(|k| *k == key) {
                    self.data.phantom.p_lesion[i] = num(key, v)?;
                } else if let Some(i) = PX_KEYS.iter().position(|k| *k == key) {
                    self.data.phantom.lesion_pixel_range[i] = pair(key, v)?;
                } else {
                    return Err(unknown_key(key));
                }
            }
        }
        Ok(())
    }

    /// Builds a configuration from ordered assignments.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let preset = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => Preset::parse(v.trim())?,
            None => Preset::default(),
        };
        let mut cfg = Self::preset(preset);
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if any) and applies `overrides` of the form `key=value`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => parse_text(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => Vec::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config("--set", format!("`{o}` is not of the form key=value")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.arch.in_channels != 1 || self.arch.num_classes != 6 {
            return Err(Error::config("arch", "slices have one channel and six classes"));
        }
        self.loss.validate()?;
        if let ClassWeights::Fixed(w) = &self.class_weights {
            LossConfig {
                class_weights: w.clone(),
                ..self.loss.clone()
            }
            .validate()?;
        }
        self.train.validate()?;
        self.data.augment.validate()?;
        PhantomSpec {
            slices: 1,
            ..self.data.phantom.clone()
        }
        .validate()?;
        if self.data.phantom.size % self.arch.required_multiple() != 0 {
            return Err(Error::config(
                "data.size",
                format!("must be a multiple of {} for {} levels", self.arch.required_multiple(), self.arch.levels),
            ));
        }
        if self.data.augment.p_crop > 0.0 {
            if let Some(&s) = self.data.augment.crop_sizes.iter().find(|&&s| s > self.data.phantom.size) {
                return Err(Error::config("data.crop_sizes", format!("crop side {s} exceeds data.size {}", self.data.phantom.size)));
            }
        }
        if !(self.eval.pixel_area_mm2 > 0.0 && self.eval.pixel_area_mm2.is_finite()) {
            return Err(Error::config("eval.pixel_area_mm2", "must be positive"));
        }
        if !["train", "val", "test"].contains(&self.eval.split.as_str()) {
            return Err(Error::config("eval.split", format!("unknown split `{}`; valid: train, val, test", self.eval.split)));
        }
        Ok(())
    }

    /// Canonical text form; loading it reproduces this configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("string write");
        }
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&p, self.to_text()).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    /// Directory of one dataset split under `data.dir`.
    pub fn split_dir(&self, split: &str) -> PathBuf {
        self.data.dir.join(split)
    }

    /// Focal weights resolved against the training-set pixel counts.
    pub fn loss_config(&self, train_counts: &[u64; 6]) -> LossConfig {
        let class_weights = match &self.class_weights {
            ClassWeights::Auto => crate::losses::inverse_frequency_weights(train_counts),
            ClassWeights::Fixed(w) => w.clone(),
        };
        LossConfig {
            class_weights,
            ..self.loss.clone()
        }
    }
}

const VESSELS: [&str; 4] = ["lm", "lad", "lcx", "rca"];
const P_KEYS: [&str; 4] = ["data.p_lm", "data.p_lad", "data.p_lcx", "data.p_rca"];
const PX_KEYS: [&str; 4] = ["data.lesion_px_lm", "data.lesion_px_lad", "data.lesion_px_lcx", "data.lesion_px_rca"];

fn unknown_key(key: &str) -> Error {
    Error::config(key, format!("unknown key; valid keys: {}", RunConfig::keys().join(", ")))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}` as {}", std::any::type_name::<T>())))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("`{v}` is not a boolean"))),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn pair<T: std::str::FromStr + Copy>(key: &str, v: &str) -> Result<(T, T)> {
    match list::<T>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::config(key, format!("`{v}` must be two comma-separated values"))),
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        for preset in [Preset::Desk, Preset::Paper] {
            let cfg = RunConfig::preset(preset);
            let text = cfg.to_text();
            let back = RunConfig::from_pairs(&parse_text(&text).unwrap()).unwrap();
            assert_eq!(back, cfg);
            let mut again = RunConfig::preset(Preset::Desk);
            for (k, v) in cfg.entries().iter().filter(|(k, _)| *k != "preset") {
                again.set(k, v).unwrap();
            }
            again.preset = preset;
            assert_eq!(again, cfg);
        }
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::load(None, &["train.epoch=3".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("config error: train.epoch"), "{msg}");
        assert!(msg.contains("train.epochs") && msg.contains("loss.variant"));
    }

    #[test]
    fn bogus_variant_lists_variants() {
        let err = RunConfig::load(None, &["loss.variant=bogus".into()]).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("ce, focal, focal_dice, focal_logdice"));
    }

    #[test]
    fn overrides_win_and_preset_applies_first() {
        let pairs = parse_text("train.epochs = 3\npreset = paper\n").unwrap();
        let cfg = RunConfig::from_pairs(&pairs).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.arch.base_channels, 64);
        let mut pairs = pairs;
        pairs.push(("train.epochs".into(), "5".into()));
        assert_eq!(RunConfig::from_pairs(&pairs).unwrap().train.epochs, 5);
    }

    #[test]
    fn class_weights_parse() {
        let cfg = RunConfig::load(None, &["loss.class_weights=1,2,3,4,5,6".into()]).unwrap();
        assert_eq!(cfg.class_weights, ClassWeights::Fixed(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert!(RunConfig::load(None, &["loss.class_weights=1,2".into()]).is_err());
    }
}

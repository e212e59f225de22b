//! Segmentation losses: weighted focal, exponential-logarithmic Dice, their
//! weighted sum (Focal LogDice), and the ablation family around it.
//!
//! Every loss has a `*_from_probs` form taking per-pixel class probabilities
//! directly and a logits form that applies a channel softmax first.

use crate::error::{Error, Result};
use crate::network::NUM_CLASSES;
use crate::tensor::{Graph, Mask, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossVariant {
    /// Unweighted cross-entropy (focal with γ = 0, α = 1).
    CrossEntropy,
    Focal,
    FocalDice,
    #[default]
    FocalLogDice,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::CrossEntropy,
        LossVariant::Focal,
        LossVariant::FocalDice,
        LossVariant::FocalLogDice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::CrossEntropy => "ce",
            LossVariant::Focal => "focal",
            LossVariant::FocalDice => "focal_dice",
            LossVariant::FocalLogDice => "focal_logdice",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("loss.variant", format!("unknown variant `{s}`; valid variants: {}", Self::valid_list())))
    }

    pub fn valid_list() -> String {
        Self::ALL.map(LossVariant::name).join(", ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub w_focal: f64,
    pub w_dice: f64,
    pub focal_gamma: f64,
    /// Per-class focal weights α.
    pub class_weights: Vec<f64>,
    /// Exponent γ_D applied to `-ln Dice`.
    pub dice_gamma: f64,
    pub smooth_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::FocalLogDice,
            w_focal: 0.4,
            w_dice: 0.6,
            focal_gamma: 2.0,
            class_weights: vec![1.0; NUM_CLASSES],
            dice_gamma: 0.3,
            smooth_eps: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_focal >= 0.0 && self.w_dice >= 0.0 && self.w_focal + self.w_dice > 0.0) {
            return Err(Error::config("loss.w_focal", "weights must be non-negative with a positive sum"));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::config("loss.focal_gamma", "must be a finite value ≥ 0"));
        }
        if !(self.dice_gamma > 0.0 && self.dice_gamma.is_finite()) {
            return Err(Error::config("loss.dice_gamma", "must be a finite value > 0"));
        }
        if !(self.smooth_eps > 0.0 && self.smooth_eps < 1.0) {
            return Err(Error::config("loss.smooth_eps", "must lie in (0, 1)"));
        }
        if self.class_weights.len() != NUM_CLASSES {
            return Err(Error::config(
                "loss.class_weights",
                format!("needs {NUM_CLASSES} values, got {}", self.class_weights.len()),
            ));
        }
        if self.class_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::config("loss.class_weights", "all weights must be positive and finite"));
        }
        Ok(())
    }

    /// `(w_focal, w_dice)` scaled to sum to 1.
    pub fn combo_weights(&self) -> (f64, f64) {
        let s = self.w_focal + self.w_dice;
        (self.w_focal / s, self.w_dice / s)
    }
}

/// Inverse pixel-frequency class weights normalized to mean 1. Classes with
/// no pixels get the weight of the rarest observed class.
pub fn inverse_frequency_weights(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    let inv: Vec<Option<f64>> = counts
        .iter()
        .map(|&c| (c > 0).then(|| total as f64 / c as f64))
        .collect();
    let rarest = inv.iter().flatten().copied().fold(1.0, f64::max);
    let inv: Vec<f64> = inv.into_iter().map(|v| v.unwrap_or(rarest)).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    inv.into_iter().map(|v| v / mean).collect()
}

/// Checks `target` against `[N, C, H, W]` probabilities and validates labels.
fn check_target(dims: &[usize], target: &Mask) -> Result<()> {
    let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    if target.spatial() != (h, w) || target.batch() != n {
        return Err(Error::dim(format!(
            "target mask {:?} does not match predictions [{n}, {c}, {h}, {w}]",
            target.dims()
        )));
    }
    target.validate(c)
}

fn prediction_dims<T: Real>(g: &Graph<T>, v: Var) -> Result<Vec<usize>> {
    let d = g.dims(v).to_vec();
    if d.len() != 4 {
        return Err(Error::dim(format!("predictions must be [N, C, H, W], got {d:?}")));
    }
    Ok(d)
}

/// One-hot encoding of `target` as an `[N, C, H, W]` constant.
pub fn one_hot<T: Real>(target: &Mask, classes: usize) -> Tensor<T> {
    let n = target.batch();
    let (h, w) = target.spatial();
    let hw = h * w;
    let mut data = vec![T::zero(); n * classes * hw];
    for (i, &lab) in target.data().iter().enumerate() {
        let (b, p) = (i / hw, i % hw);
        data[(b * classes + lab as usize) * hw + p] = T::one();
    }
    Tensor::from_parts_unchecked(vec![n, classes, h, w], data)
}

/// Mean over pixels of `-α_c (1 - p_c)^γ ln p_c`, `p_c` clamped to `[ε, 1]`.
pub fn weighted_focal_from_probs<T: Real>(g: &mut Graph<T>, probs: Var, target: &Mask, cfg: &LossConfig) -> Result<Var> {
    focal_core(g, probs, target, cfg.focal_gamma, &cfg.class_weights, cfg.smooth_eps)
}

fn focal_core<T: Real>(
    g: &mut Graph<T>,
    probs: Var,
    target: &Mask,
    gamma: f64,
    alpha: &[f64],
    eps: f64,
) -> Result<Var> {
    let d = prediction_dims(g, probs)?;
    check_target(&d, target)?;
    if alpha.len() != d[1] {
        return Err(Error::config("loss.class_weights", format!("needs {} values, got {}", d[1], alpha.len())));
    }
    let onehot = g.constant(one_hot(target, d[1]))?;
    let alpha_map = Tensor::new(
        vec![d[0], 1, d[2], d[3]],
        target.data().iter().map(|&l| T::lit(alpha[l as usize])).collect(),
    )?;
    let alpha_map = g.constant(alpha_map)?;
    let picked = g.mul(probs, onehot)?;
    let p_true = g.sum_axes(picked, &[1])?;
    let p_true = g.clamp(p_true, T::lit(eps), T::one())?;
    let log_p = g.ln(p_true)?;
    let term = if gamma == 0.0 {
        log_p
    } else {
        let miss = g.affine(p_true, -T::one(), T::one())?;
        let modulation = g.pow(miss, T::lit(gamma))?;
        g.mul(log_p, modulation)?
    };
    let weighted = g.mul(term, alpha_map)?;
    let mean = g.mean_all(weighted)?;
    g.affine(mean, -T::one(), T::zero())
}

/// Batch soft Dice per class, `(2Σpt + ε) / (Σp + Σt + ε)`, as `[1, C, 1, 1]`.
pub fn soft_dice_per_class<T: Real>(g: &mut Graph<T>, probs: Var, target: &Mask, eps: f64) -> Result<Var> {
    let d = prediction_dims(g, probs)?;
    check_target(&d, target)?;
    let c = d[1];
    let onehot = g.constant(one_hot(target, c))?;
    let counts = target.class_counts(c);
    let inter = g.mul(probs, onehot)?;
    let inter = g.sum_axes(inter, &[0, 2, 3])?;
    let num = g.affine(inter, T::lit(2.0), T::lit(eps))?;
    let mass = g.sum_axes(probs, &[0, 2, 3])?;
    let offset = Tensor::new(vec![1, c, 1, 1], counts.iter().map(|&k| T::lit(k as f64 + eps)).collect())?;
    let offset = g.constant(offset)?;
    let den = g.add(mass, offset)?;
    g.div(num, den)
}

/// Mean over classes of `(-ln Dice_i)^γ_D`.
pub fn exp_log_dice_from_probs<T: Real>(g: &mut Graph<T>, probs: Var, target: &Mask, cfg: &LossConfig) -> Result<Var> {
    let dice = soft_dice_per_class(g, probs, target, cfg.smooth_eps)?;
    let log = g.ln(dice)?;
    let neg = g.affine(log, -T::one(), T::zero())?;
    let neg = g.clamp(neg, T::zero(), T::infinity())?;
    let shaped = g.pow(neg, T::lit(cfg.dice_gamma))?;
    g.mean_all(shaped)
}

/// `1 - mean_i Dice_i`.
pub fn linear_dice_from_probs<T: Real>(g: &mut Graph<T>, probs: Var, target: &Mask, cfg: &LossConfig) -> Result<Var> {
    let dice = soft_dice_per_class(g, probs, target, cfg.smooth_eps)?;
    let mean = g.mean_all(dice)?;
    g.affine(mean, -T::one(), T::one())
}

/// `w_focal · a + w_dice · b` as a single graph node.
fn weighted_sum<T: Real>(g: &mut Graph<T>, a: Var, b: Var, cfg: &LossConfig) -> Result<Var> {
    let (wf, wd) = cfg.combo_weights();
    let a = g.affine(a, T::lit(wf), T::zero())?;
    let b = g.affine(b, T::lit(wd), T::zero())?;
    g.add(a, b)
}

pub fn focal_logdice_from_probs<T: Real>(g: &mut Graph<T>, probs: Var, target: &Mask, cfg: &LossConfig) -> Result<Var> {
    let focal = weighted_focal_from_probs(g, probs, target, cfg)?;
    let dice = exp_log_dice_from_probs(g, probs, target, cfg)?;
    weighted_sum(g, focal, dice, cfg)
}

/// Loss selected by `cfg.variant`, on probabilities.
pub fn loss_from_probs<T: Real>(g: &mut Graph<T>, probs: Var, target: &Mask, cfg: &LossConfig) -> Result<Var> {
    match cfg.variant {
        LossVariant::CrossEntropy => {
            let ones = vec![1.0; g.dims(probs).get(1).copied().unwrap_or(NUM_CLASSES)];
            focal_core(g, probs, target, 0.0, &ones, cfg.smooth_eps)
        }
        LossVariant::Focal => weighted_focal_from_probs(g, probs, target, cfg),
        LossVariant::FocalDice => {
            let focal = weighted_focal_from_probs(g, probs, target, cfg)?;
            let dice = linear_dice_from_probs(g, probs, target, cfg)?;
            weighted_sum(g, focal, dice, cfg)
        }
        LossVariant::FocalLogDice => focal_logdice_from_probs(g, probs, target, cfg),
    }
}

pub fn weighted_focal<T: Real>(g: &mut Graph<T>, logits: Var, target: &Mask, cfg: &LossConfig) -> Result<Var> {
    let p = g.softmax_channel(logits)?;
    weighted_focal_from_probs(g, p, target, cfg)
}

pub fn exp_log_dice<T: Real>(g: &mut Graph<T>, logits: Var, target: &Mask, cfg: &LossConfig) -> Result<Var> {
    let p = g.softmax_channel(logits)?;
    exp_log_dice_from_probs(g, p, target, cfg)
}

pub fn focal_logdice<T: Real>(g: &mut Graph<T>, logits: Var, target: &Mask, cfg: &LossConfig) -> Result<Var> {
    let p = g.softmax_channel(logits)?;
    focal_logdice_from_probs(g, p, target, cfg)
}

/// Loss selected by `cfg.variant`, on logits.
pub fn loss<T: Real>(g: &mut Graph<T>, logits: Var, target: &Mask, cfg: &LossConfig) -> Result<Var> {
    let p = g.softmax_channel(logits)?;
    loss_from_probs(g, p, target, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs_graph(probs: Vec<f64>, dims: Vec<usize>) -> (Graph<f64>, Var) {
        let mut g = Graph::new();
        let v = g.param(Tensor::new(dims, probs).unwrap()).unwrap();
        (g, v)
    }

    #[test]
    fn single_pixel_focal_value() {
        // p_c = 0.5, γ = 2, α = 1: 0.25 · ln 2
        let mut probs = vec![0.1; 6];
        probs[2] = 0.5;
        let (mut g, p) = probs_graph(probs, vec![1, 6, 1, 1]);
        let target = Mask::new(vec![1, 1, 1], vec![2]).unwrap();
        let l = weighted_focal_from_probs(&mut g, p, &target, &LossConfig::default()).unwrap();
        let v = g.value(l).data()[0];
        assert!((v - 0.173_286_795_139_986_3).abs() < 1e-12, "{v}");
    }

    #[test]
    fn perfect_one_hot_has_zero_losses() {
        let target = Mask::new(vec![1, 2, 3], vec![0, 1, 2, 3, 4, 5]).unwrap();
        let onehot: Tensor<f64> = one_hot(&target, 6);
        for variant in LossVariant::ALL {
            let mut g = Graph::new();
            let p = g.constant(onehot.clone()).unwrap();
            let cfg = LossConfig {
                variant,
                ..LossConfig::default()
            };
            let l = loss_from_probs(&mut g, p, &target, &cfg).unwrap();
            assert!(g.value(l).data()[0].abs() < 1e-6, "{variant:?}");
        }
    }

    #[test]
    fn out_of_range_label_is_reported() {
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::zeros(vec![1, 6, 1, 2]).unwrap()).unwrap();
        let target = Mask::new(vec![1, 1, 2], vec![0, 7]).unwrap();
        let err = loss(&mut g, logits, &target, &LossConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Label { value: 7, position: 1 }), "{err}");
    }

    #[test]
    fn variant_names_round_trip() {
        for v in LossVariant::ALL {
            assert_eq!(LossVariant::parse(v.name()).unwrap(), v);
        }
        let err = LossVariant::parse("bogus").unwrap_err().to_string();
        assert!(err.contains("focal_logdice") && err.contains("ce"), "{err}");
    }

    #[test]
    fn inverse_frequency_has_unit_mean() {
        let w = inverse_frequency_weights(&[900, 50, 1, 20, 9, 20]);
        let mean = w.iter().sum::<f64>() / 6.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(w[2] > w[3] && w[3] > w[1] && w[1] > w[0]);
    }
}

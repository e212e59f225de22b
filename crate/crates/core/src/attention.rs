//! Coordinate attention and the RICA encoder block.
//!
//! Coordinate attention factorizes spatial attention into a height profile
//! `a_h: [N,C,H,1]` and a width profile `a_w: [N,C,1,W]`, then gates the input
//! as `y = x ⊙ a_w ⊙ a_h`. The RICA block adds a two-convolution main path to a
//! skip path that runs coordinate attention followed by a projection shortcut
//! (1×1 convolution + batch norm).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Activation, Conv, ConvBn};
use crate::network::{Bound, MomentAccess, ParameterStore};
use crate::tensor::{Axis, Graph, Real, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CaConfig {
    pub reduction_ratio: usize,
    pub min_mid_channels: usize,
    /// Nonlinearity after the shared 1×1 convolution.
    pub activation: Activation,
}

impl Default for CaConfig {
    fn default() -> Self {
        Self {
            reduction_ratio: 32,
            min_mid_channels: 8,
            activation: Activation::Relu,
        }
    }
}

impl CaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction_ratio == 0 {
            return Err(Error::config("arch.ca_reduction", "must be at least 1"));
        }
        if self.min_mid_channels == 0 {
            return Err(Error::config("arch.ca_min_mid", "must be at least 1"));
        }
        Ok(())
    }

    pub fn mid_channels(&self, channels: usize) -> usize {
        (channels / self.reduction_ratio).max(self.min_mid_channels).max(1)
    }
}

/// Sigmoid gate used to form the attention maps. `Ones` replaces both maps by
/// all-ones and exists to test the gating path in isolation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Gate {
    #[default]
    Sigmoid,
    Ones,
}

/// Height and width attention produced inside a coordinate-attention module.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMaps {
    /// `[N, C, H, 1]`
    pub a_h: Var,
    /// `[N, C, 1, W]`
    pub a_w: Var,
}

/// Coordinate-attention module over `channels` feature maps.
///
/// Parameters live under `{prefix}.shared.{conv,bn}`, `{prefix}.conv_h` and
/// `{prefix}.conv_w`.
#[derive(Clone, Debug)]
pub struct CoordinateAttention {
    pub prefix: String,
    pub channels: usize,
    pub mid: usize,
    shared: ConvBn,
    conv_h: Conv,
    conv_w: Conv,
}

impl CoordinateAttention {
    pub fn new(prefix: &str, channels: usize, cfg: CaConfig) -> Result<Self> {
        cfg.validate()?;
        let mid = cfg.mid_channels(channels);
        Ok(Self {
            prefix: prefix.to_string(),
            channels,
            mid,
            shared: ConvBn::new(&format!("{prefix}.shared"), channels, mid, 1, Some(cfg.activation)),
            conv_h: Conv::new(format!("{prefix}.conv_h"), mid, channels, 1, 0),
            conv_w: Conv::new(format!("{prefix}.conv_w"), mid, channels, 1, 0),
        })
    }

    pub fn param_count(&self) -> usize {
        self.shared.param_count() + self.conv_h.param_count() + self.conv_w.param_count()
    }

    pub fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) {
        self.shared.register(store, rng);
        self.conv_h.register(store, rng);
        self.conv_w.register(store, rng);
    }

    /// Fresh parameter store holding only this module.
    pub fn init_store<T: Real>(&self, seed: u64) -> Result<ParameterStore<T>> {
        let mut store = ParameterStore::new();
        self.register(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(store)
    }

    /// Computes `a_h` and `a_w` for `x`.
    pub fn attention_maps<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        m: &mut MomentAccess<'_, T>,
        x: Var,
        gate: Gate,
    ) -> Result<AttentionMaps> {
        let d = g.dims(x).to_vec();
        if d.len() != 4 || d[1] != self.channels {
            return Err(Error::dim(format!(
                "coordinate attention `{}` expects [N, {}, H, W], got {d:?}",
                self.prefix, self.channels
            )));
        }
        let (n, h, w) = (d[0], d[2], d[3]);
        let pooled_h = g.directional_avgpool(x, Axis::Width)?; // [N,C,H,1]
        let pooled_w = g.directional_avgpool(x, Axis::Height)?; // [N,C,1,W]
        let pooled_w = g.reshape(pooled_w, &[n, self.channels, w, 1])?;
        let joint = g.concat(&[pooled_h, pooled_w], 2)?; // [N,C,H+W,1]
        let f = self.shared.forward(g, p, m, joint)?;
        let f_h = g.narrow(f, 2, 0, h)?;
        let f_w = g.narrow(f, 2, h, w)?;
        let f_w = g.reshape(f_w, &[n, self.mid, 1, w])?;
        let logits_h = self.conv_h.forward(g, p, f_h)?;
        let logits_w = self.conv_w.forward(g, p, f_w)?;
        let (a_h, a_w) = match gate {
            Gate::Sigmoid => (g.sigmoid(logits_h)?, g.sigmoid(logits_w)?),
            Gate::Ones => (g.affine(logits_h, T::zero(), T::one())?, g.affine(logits_w, T::zero(), T::one())?),
        };
        Ok(AttentionMaps { a_h, a_w })
    }

    pub fn forward_gated<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        m: &mut MomentAccess<'_, T>,
        x: Var,
        gate: Gate,
    ) -> Result<Var> {
        let maps = self.attention_maps(g, p, m, x, gate)?;
        let y = g.mul(x, maps.a_w)?;
        g.mul(y, maps.a_h)
    }

    /// `y = x ⊙ a_w ⊙ a_h`, same dims as `x`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, m: &mut MomentAccess<'_, T>, x: Var) -> Result<Var> {
        self.forward_gated(g, p, m, x, Gate::Sigmoid)
    }
}

/// Outputs of the two RICA paths before they are summed.
#[derive(Clone, Copy, Debug)]
pub struct RicaPaths {
    pub main: Var,
    pub skip: Var,
}

/// Residual block whose shortcut is coordinate attention followed by a
/// projection shortcut: `y = F(x) + PJS(CA(x))`.
///
/// Parameters live under `{prefix}.f1`, `{prefix}.f2`, `{prefix}.ca` and `{prefix}.pjs`.
#[derive(Clone, Debug)]
pub struct RicaBlock {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
    f1: ConvBn,
    f2: ConvBn,
    ca: CoordinateAttention,
    pjs: ConvBn,
}

impl RicaBlock {
    pub fn new(prefix: &str, cin: usize, cout: usize, ca: CaConfig) -> Result<Self> {
        Ok(Self {
            prefix: prefix.to_string(),
            cin,
            cout,
            f1: ConvBn::new(&format!("{prefix}.f1"), cin, cout, 3, Some(Activation::Relu)),
            f2: ConvBn::new(&format!("{prefix}.f2"), cout, cout, 3, Some(Activation::Relu)),
            ca: CoordinateAttention::new(&format!("{prefix}.ca"), cin, ca)?,
            pjs: ConvBn::new(&format!("{prefix}.pjs"), cin, cout, 1, None),
        })
    }

    pub fn param_count(&self) -> usize {
        self.f1.param_count() + self.f2.param_count() + self.ca.param_count() + self.pjs.param_count()
    }

    pub fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) {
        self.f1.register(store, rng);
        self.f2.register(store, rng);
        self.ca.register(store, rng);
        self.pjs.register(store, rng);
    }

    pub fn init_store<T: Real>(&self, seed: u64) -> Result<ParameterStore<T>> {
        let mut store = ParameterStore::new();
        self.register(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(store)
    }

    /// Both paths, evaluated independently on `x`.
    pub fn paths<T: Real>(&self, g: &mut Graph<T>, p: &Bound, m: &mut MomentAccess<'_, T>, x: Var) -> Result<RicaPaths> {
        let main = self.f1.forward(g, p, m, x)?;
        let main = self.f2.forward(g, p, m, main)?;
        let attended = self.ca.forward(g, p, m, x)?;
        let skip = self.pjs.forward(g, p, m, attended)?;
        if g.dims(main) != g.dims(skip) {
            return Err(Error::Contract(format!(
                "RICA block `{}`: main path {:?} and skip path {:?} disagree",
                self.prefix,
                g.dims(main),
                g.dims(skip)
            )));
        }
        Ok(RicaPaths { main, skip })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, m: &mut MomentAccess<'_, T>, x: Var) -> Result<Var> {
        let RicaPaths { main, skip } = self.paths(g, p, m, x)?;
        g.add(main, skip)
    }
}

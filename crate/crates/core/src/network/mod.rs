//! RICAU-Net assembly and its CA-free U-Net baseline.
//!
//! Encoder: one RICA block per level with 2×2 max pooling between levels,
//! then a RICA bottleneck. Decoder, per level from deepest to shallowest:
//! bilinear ×2 upsample → coordinate attention → concat with the encoder skip
//! → two conv-BN-ReLU layers. A 1×1 head maps to class logits. With CA
//! disabled, every RICA block becomes a plain double convolution and the
//! decoder attention modules are dropped.

pub mod checkpoint;
mod params;

pub use params::{Bound, MomentAccess, MomentTable, ParameterStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{CaConfig, CoordinateAttention, RicaBlock};
use crate::error::{Error, Result};
use crate::layers::{Activation, Conv, ConvBn};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const NUM_CLASSES: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    /// Number of encoder levels before the bottleneck.
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// `false` builds the vanilla U-Net baseline.
    pub ca_enabled: bool,
    pub ca: CaConfig,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 64,
            in_channels: 1,
            num_classes: NUM_CLASSES,
            ca_enabled: true,
            ca: CaConfig::default(),
        }
    }
}

impl ArchConfig {
    /// Small network used for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            levels: 2,
            base_channels: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("arch.levels", "must be at least 1"));
        }
        if self.levels > 8 {
            return Err(Error::config("arch.levels", "must be at most 8"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("arch.base_channels", "must be at least 1"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("arch.in_channels", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("arch.num_classes", "must be at least 2"));
        }
        self.ca.validate()
    }

    /// Channel width at encoder level `k` (the bottleneck is level `levels`).
    pub fn width(&self, k: usize) -> usize {
        self.base_channels << k
    }

    /// Spatial extents must be divisible by this.
    pub fn required_multiple(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Clone, Debug)]
enum EncoderBlock {
    Rica(RicaBlock),
    Plain { f1: ConvBn, f2: ConvBn },
}

impl EncoderBlock {
    fn new(prefix: &str, cin: usize, cout: usize, arch: &ArchConfig) -> Result<Self> {
        if arch.ca_enabled {
            Ok(Self::Rica(RicaBlock::new(&format!("{prefix}.rica"), cin, cout, arch.ca.clone())?))
        } else {
            Ok(Self::Plain {
                f1: ConvBn::new(&format!("{prefix}.conv.f1"), cin, cout, 3, Some(Activation::Relu)),
                f2: ConvBn::new(&format!("{prefix}.conv.f2"), cout, cout, 3, Some(Activation::Relu)),
            })
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Self::Rica(b) => b.param_count(),
            Self::Plain { f1, f2 } => f1.param_count() + f2.param_count(),
        }
    }

    fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) {
        match self {
            Self::Rica(b) => b.register(store, rng),
            Self::Plain { f1, f2 } => {
                f1.register(store, rng);
                f2.register(store, rng);
            }
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, m: &mut MomentAccess<'_, T>, x: Var) -> Result<Var> {
        match self {
            Self::Rica(b) => b.forward(g, p, m, x),
            Self::Plain { f1, f2 } => {
                let y = f1.forward(g, p, m, x)?;
                f2.forward(g, p, m, y)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    ca: Option<CoordinateAttention>,
    c1: ConvBn,
    c2: ConvBn,
}

impl DecoderBlock {
    fn param_count(&self) -> usize {
        self.ca.as_ref().map_or(0, CoordinateAttention::param_count) + self.c1.param_count() + self.c2.param_count()
    }
}

/// The network description. Parameters live in a separate [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct RicauNet {
    arch: ArchConfig,
    encoders: Vec<EncoderBlock>,
    bottleneck: EncoderBlock,
    decoders: Vec<DecoderBlock>,
    head: Conv,
}

impl RicauNet {
    pub fn new(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut encoders = Vec::with_capacity(arch.levels);
        let mut cin = arch.in_channels;
        for level in 0..arch.levels {
            encoders.push(EncoderBlock::new(&format!("enc{level}"), cin, arch.width(level), &arch)?);
            cin = arch.width(level);
        }
        let bottleneck = EncoderBlock::new("bottleneck", cin, arch.width(arch.levels), &arch)?;
        let mut decoders = Vec::with_capacity(arch.levels);
        for level in 0..arch.levels {
            let below = arch.width(level + 1);
            let skip = arch.width(level);
            let ca = if arch.ca_enabled {
                Some(CoordinateAttention::new(&format!("dec{level}.ca"), below, arch.ca.clone())?)
            } else {
                None
            };
            decoders.push(DecoderBlock {
                ca,
                c1: ConvBn::new(&format!("dec{level}.c1"), below + skip, skip, 3, Some(Activation::Relu)),
                c2: ConvBn::new(&format!("dec{level}.c2"), skip, skip, 3, Some(Activation::Relu)),
            });
        }
        let head = Conv::new("head.conv", arch.base_channels, arch.num_classes, 1, 0);
        Ok(Self {
            arch,
            encoders,
            bottleneck,
            decoders,
            head,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Number of trainable scalars, summed over the declared layers.
    pub fn param_count(&self) -> usize {
        self.encoders.iter().map(EncoderBlock::param_count).sum::<usize>()
            + self.bottleneck.param_count()
            + self.decoders.iter().map(DecoderBlock::param_count).sum::<usize>()
            + self.head.param_count()
    }

    /// Fresh parameters: Kaiming-normal convolutions, zero biases, unit/zero
    /// batch-norm affine. Deterministic in `seed`.
    pub fn init_store<T: Real>(&self, seed: u64) -> Result<ParameterStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for e in &self.encoders {
            e.register(&mut store, &mut rng);
        }
        self.bottleneck.register(&mut store, &mut rng);
        for d in &self.decoders {
            if let Some(ca) = &d.ca {
                ca.register(&mut store, &mut rng);
            }
            d.c1.register(&mut store, &mut rng);
            d.c2.register(&mut store, &mut rng);
        }
        self.head.register(&mut store, &mut rng);
        Ok(store)
    }

    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        if dims.len() != 4 || dims[1] != self.arch.in_channels {
            return Err(Error::dim(format!(
                "network input must be [N, {}, H, W], got {dims:?}",
                self.arch.in_channels
            )));
        }
        let k = self.arch.required_multiple();
        if dims[2] % k != 0 || dims[3] % k != 0 {
            return Err(Error::dim(format!(
                "input extents {}x{} must be multiples of {k} for {} levels",
                dims[2], dims[3], self.arch.levels
            )));
        }
        Ok(())
    }

    /// Logits `[N, classes, H, W]` with parameters already bound on `g`.
    pub fn forward_bound<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        m: &mut MomentAccess<'_, T>,
        x: Var,
    ) -> Result<Var> {
        self.check_input(g.dims(x))?;
        let mut skips = Vec::with_capacity(self.arch.levels);
        let mut h = x;
        for enc in &self.encoders {
            let y = enc.forward(g, p, m, h)?;
            skips.push(y);
            h = g.maxpool2(y)?;
        }
        h = self.bottleneck.forward(g, p, m, h)?;
        for (level, dec) in self.decoders.iter().enumerate().rev() {
            let mut up = g.upsample_bilinear2(h)?;
            if let Some(ca) = &dec.ca {
                up = ca.forward(g, p, m, up)?;
            }
            let cat = g.concat_channels(skips[level], up)?;
            let y = dec.c1.forward(g, p, m, cat)?;
            h = dec.c2.forward(g, p, m, y)?;
        }
        self.head.forward(g, p, h)
    }

    /// Training-mode forward: binds every parameter as a trainable leaf and
    /// updates running moments in `store`.
    pub fn forward_train<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParameterStore<T>,
        input: Tensor<T>,
    ) -> Result<(Var, Bound)> {
        let bound = store.bind(g, true)?;
        let x = g.constant(input)?;
        let logits = self.forward_bound(g, &bound, &mut store.train_access(), x)?;
        Ok((logits, bound))
    }

    /// Evaluation-mode logits. Reads `store` only.
    pub fn predict<T: Real>(&self, store: &ParameterStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false)?;
        let x = g.constant(input.clone())?;
        let logits = self.forward_bound(&mut g, &bound, &mut store.eval_access(), x)?;
        Ok(g.value(logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_matches_declared_count() {
        for ca_enabled in [true, false] {
            let net = RicauNet::new(ArchConfig {
                levels: 2,
                base_channels: 4,
                ca_enabled,
                ..ArchConfig::default()
            })
            .unwrap();
            let store = net.init_store::<f32>(0).unwrap();
            assert_eq!(store.num_scalars(), net.param_count());
        }
    }

    #[test]
    fn names_follow_convention() {
        let net = RicauNet::new(ArchConfig::desk()).unwrap();
        let store = net.init_store::<f32>(0).unwrap();
        for want in [
            "enc0.rica.f1.conv.weight",
            "enc1.rica.f2.bn.gamma",
            "enc0.rica.pjs.conv.weight",
            "enc0.rica.ca.shared.conv.weight",
            "enc0.rica.ca.conv_h.weight",
            "bottleneck.rica.ca.conv_w.bias",
            "dec0.ca.conv_h.weight",
            "dec1.c1.conv.weight",
            "head.conv.weight",
        ] {
            assert!(store.param(want).is_some(), "missing {want}");
        }
        assert!(store.moment("enc0.rica.f1.bn").is_some());
    }

    #[test]
    fn rejects_indivisible_input() {
        let net = RicauNet::new(ArchConfig::desk()).unwrap();
        let store = net.init_store::<f32>(0).unwrap();
        let x = Tensor::zeros(vec![1, 1, 18, 16]).unwrap();
        let err = net.predict(&store, &x).unwrap_err();
        assert!(err.to_string().contains("multiples of 4"), "{err}");
    }
}

//! Named convolution / batch-norm building blocks shared by the attention
//! modules and the network.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::network::{Bound, MomentAccess, ParameterStore};
use crate::tensor::{Graph, Real, RunningMoments, Tensor, Var};

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Relu,
    HardSwish,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::HardSwish => g.hardswish(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::HardSwish => "hardswish",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "hardswish" => Some(Activation::HardSwish),
            _ => None,
        }
    }
}

/// Square-kernel convolution with bias. Parameters: `{name}.weight`, `{name}.bias`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, padding: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            padding,
        }
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel + self.cout
    }

    /// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero bias.
    pub fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) {
        let fan_in = (self.cin * self.kernel * self.kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let dims = vec![self.cout, self.cin, self.kernel, self.kernel];
        let w = Tensor::from_fn(dims, |_| T::lit(normal.sample(rng))).expect("positive dims");
        store.insert_param(format!("{}.weight", self.name), w);
        store.insert_param(
            format!("{}.bias", self.name),
            Tensor::zeros(vec![self.cout]).expect("positive dims"),
        );
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = p.get(&format!("{}.bias", self.name))?;
        g.conv2d(x, w, Some(b), 1, self.padding)
    }
}

/// Batch normalization. Parameters `{name}.gamma`, `{name}.beta`; running
/// moments stored under `{name}`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn register<T: Real>(&self, store: &mut ParameterStore<T>) {
        let c = vec![self.channels];
        store.insert_param(format!("{}.gamma", self.name), Tensor::ones(c.clone()).expect("positive dims"));
        store.insert_param(format!("{}.beta", self.name), Tensor::zeros(c).expect("positive dims"));
        store.insert_moments(self.name.clone(), RunningMoments::new(self.channels));
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, m: &mut MomentAccess<'_, T>, x: Var) -> Result<Var> {
        let gamma = p.get(&format!("{}.gamma", self.name))?;
        let beta = p.get(&format!("{}.beta", self.name))?;
        let state = m.state(&self.name)?;
        g.batchnorm2d(x, gamma, beta, state)
    }
}

/// Convolution → batch norm → optional activation, under `{name}.conv` / `{name}.bn`.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub act: Option<Activation>,
}

impl ConvBn {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, act: Option<Activation>) -> Self {
        Self {
            conv: Conv::new(format!("{name}.conv"), cin, cout, kernel, kernel / 2),
            bn: BatchNorm::new(format!("{name}.bn"), cout),
            act,
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }

    pub fn register<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) {
        self.conv.register(store, rng);
        self.bn.register(store);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, m: &mut MomentAccess<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, p, x)?;
        let y = self.bn.forward(g, p, m, y)?;
        match self.act {
            Some(a) => a.apply(g, y),
            None => Ok(y),
        }
    }
}

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::network::{Bound, ParameterStore};
use crate::tensor::{Graph, Tensor};

/// Gradients keyed by parameter name.
pub type Gradients = IndexMap<String, Tensor<f32>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, b) in [("train.adam_beta1", self.beta1), ("train.adam_beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, format!("{b} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        Ok(())
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: IndexMap<String, Tensor<f32>>,
    pub v: IndexMap<String, Tensor<f32>>,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore<f32>, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .params()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.dims().to_vec()).expect("dims from a live tensor")))
                .collect::<IndexMap<_, _>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Copies the gradient of every bound parameter off the tape.
pub fn gradients(g: &Graph<f32>, bound: &Bound) -> Gradients {
    bound
        .iter()
        .filter_map(|(name, var)| g.grad(var).map(|t| (name.to_string(), t.clone())))
        .collect()
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step(store: &mut ParameterStore<f32>, grads: &Gradients, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if let Some(name) = store.params().map(|(k, _)| k).find(|k| !grads.contains_key(*k)) {
        return Err(Error::Contract(format!("no gradient for parameter `{name}`")));
    }
    state.step += 1;
    let t = state.step as i32;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = (1.0 - beta1.powi(t)) as f32;
    let bc2 = (1.0 - beta2.powi(t)) as f32;
    let (b1, b2, eps, lr) = (beta1 as f32, beta2 as f32, eps as f32, lr as f32);
    for (name, p) in store.params_mut() {
        let g = &grads[name];
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("optimizer has no moments for `{name}`")))?;
        let v = state.v.get_mut(name).expect("m and v share keys");
        if g.dims() != p.dims() || m.dims() != p.dims() {
            return Err(Error::dim(format!(
                "`{name}`: parameter {:?}, gradient {:?}, moment {:?}",
                p.dims(),
                g.dims(),
                m.dims()
            )));
        }
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

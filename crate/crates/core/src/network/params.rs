use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{BnState, Graph, Real, RunningMoments, Tensor, Var};

pub type MomentTable<T> = IndexMap<String, RunningMoments<T>>;

/// Named, ordered trainable tensors plus batch-norm running moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T = f32> {
    params: IndexMap<String, Tensor<T>>,
    moments: MomentTable<T>,
}

impl<T: Real> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            moments: IndexMap::new(),
        }
    }

    /// Inserts a parameter. Names must be unique.
    pub fn insert_param(&mut self, name: String, value: Tensor<T>) {
        let previous = self.params.insert(name.clone(), value);
        assert!(previous.is_none(), "duplicate parameter name `{name}`");
    }

    pub fn insert_moments(&mut self, name: String, value: RunningMoments<T>) {
        let previous = self.moments.insert(name.clone(), value);
        assert!(previous.is_none(), "duplicate batch-norm name `{name}`");
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &RunningMoments<T>)> {
        self.moments.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn moment(&self, name: &str) -> Option<&RunningMoments<T>> {
        self.moments.get(name)
    }

    pub fn moment_table(&self) -> &MomentTable<T> {
        &self.moments
    }

    pub fn moment_table_mut(&mut self) -> &mut MomentTable<T> {
        &mut self.moments
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            moments: self.moments.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Records every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Bound> {
        let mut vars = IndexMap::with_capacity(self.params.len());
        for (name, value) in &self.params {
            vars.insert(name.clone(), g.leaf(value.clone(), trainable)?);
        }
        Ok(Bound { vars })
    }

    /// Associates existing graph variables with parameter names.
    pub fn bind_vars(&self, names: &[String], vars: &[Var]) -> Bound {
        Bound {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    /// Batch-norm access in training mode: batch statistics, moments updated.
    pub fn train_access(&mut self) -> MomentAccess<'_, T> {
        MomentAccess::Train(&mut self.moments)
    }

    /// Batch-norm access in evaluation mode: stored moments, nothing mutated.
    pub fn eval_access(&self) -> MomentAccess<'_, T> {
        MomentAccess::Eval(&self.moments)
    }
}

/// Parameter names mapped to their leaves on one graph.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Batch-norm moment table viewed in training or evaluation mode.
pub enum MomentAccess<'a, T> {
    Train(&'a mut MomentTable<T>),
    Eval(&'a MomentTable<T>),
}

impl<T: Real> MomentAccess<'_, T> {
    pub fn is_training(&self) -> bool {
        matches!(self, MomentAccess::Train(_))
    }

    pub fn state(&mut self, name: &str) -> Result<BnState<'_, T>> {
        let missing = || Error::Contract(format!("batch-norm moments `{name}` are missing"));
        match self {
            MomentAccess::Train(t) => t.get_mut(name).map(BnState::Train).ok_or_else(missing),
            MomentAccess::Eval(t) => t.get(name).map(BnState::Eval).ok_or_else(missing),
        }
    }
}

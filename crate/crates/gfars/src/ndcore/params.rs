use super::{Gradients, NdError, NdResult, Tape, Tensor, Var};
use indexmap::IndexMap;

/// Named model parameters with a stable iteration order.
///
/// Insertion order is the serialization order, so checkpoints written from
/// the same registration sequence are byte-identical. Names are dotted paths
/// such as `enc.l0.w` or `score.head.b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    entries: IndexMap<String, Tensor>,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::new()
    }
}

impl ModelParams {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Register a new parameter. Duplicate names are an error: every name
    /// maps to exactly one tensor for the lifetime of the model.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> NdResult<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NdError::DuplicateParam(name));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> NdResult<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| NdError::UnknownParam(name.to_string()))
    }

    /// Replace the value of an existing parameter. The new tensor must keep
    /// the registered shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> NdResult<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NdError::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(NdError::Dimension {
                op: "ModelParams::set",
                detail: format!(
                    "{name}: registered {:?}, got {:?}",
                    slot.shape(),
                    value.shape()
                ),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Entries in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Push every parameter onto a tape as a leaf, returning the vars keyed
    /// by name in registration order.
    pub fn bind(&self, tape: &Tape) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        ParamVars { vars }
    }

    /// In-place gradient step `p -= lr * g` for every bound parameter with a
    /// gradient. Used by tests and toy fits; real training goes through the
    /// Adam optimizer.
    pub fn sgd_step(&mut self, vars: &ParamVars, grads: &Gradients, lr: f64) -> NdResult<()> {
        for (name, &var) in &vars.vars {
            if let Some(g) = grads.get(var) {
                let updated = self.get(name)?.zip_map(g, |p, gi| p - lr * gi)?;
                self.set(name, updated)?;
            }
        }
        Ok(())
    }
}

/// Tape bindings for a full parameter set, from [`ModelParams::bind`].
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> NdResult<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NdError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

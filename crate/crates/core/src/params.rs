use indexmap::IndexMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// One named parameter: its value, a gradient slot of the same shape, and a
/// frozen flag.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            value,
            grad,
            frozen: false,
        }
    }

    pub fn frozen(value: Tensor) -> Self {
        Param {
            frozen: true,
            ..Param::new(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Ordered map from dotted path (`layers.0.attn.q.weight`) to [`Param`].
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    entries: IndexMap<String, Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, param: Param) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path {path:?}")));
        }
        self.entries.insert(path, param);
        Ok(())
    }

    /// Inserts or replaces a parameter, keeping its position if it existed.
    pub fn upsert(&mut self, path: impl Into<String>, param: Param) {
        self.entries.insert(path.into(), param);
    }

    pub fn get(&self, path: &str) -> Option<&Param> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param> {
        self.entries.get_mut(path)
    }

    /// Looks up a parameter that the owning component is known to have.
    pub(crate) fn expect(&self, path: &str) -> &Param {
        self.entries
            .get(path)
            .unwrap_or_else(|| panic!("parameter {path:?} missing"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Names of the entries that an optimizer may update.
    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Total scalar count over all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in self.entries.values_mut() {
            p.frozen = frozen;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.zero_grad();
        }
    }

    /// Replaces the value of an existing entry, shape-checked.
    pub fn assign(&mut self, path: &str, value: Tensor) -> Result<()> {
        let Some(p) = self.entries.get_mut(path) else {
            return Err(Error::Config(format!("unknown parameter path {path:?}")));
        };
        if p.value.shape() != value.shape() {
            return shape_err(format!(
                "parameter {path:?} has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            ));
        }
        p.value = value;
        Ok(())
    }

    /// True when both sets hold the same paths with bitwise-equal values.
    pub fn bitwise_eq(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.value.bitwise_eq(&b.value))
    }
}

//! The contract every pipeline component implements.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::LoraAdapter;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};
use crate::params::{Param, ParameterSet};

/// The four component roles. Also the vocabulary of `parts_to_train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Encoder,
    Backbone,
    Adapter,
    Decoder,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 4] = [
        ComponentKind::Encoder,
        ComponentKind::Backbone,
        ComponentKind::Adapter,
        ComponentKind::Decoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Encoder => "encoder",
            ComponentKind::Backbone => "backbone",
            ComponentKind::Adapter => "adapter",
            ComponentKind::Decoder => "decoder",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            ComponentKind::Encoder => 0,
            ComponentKind::Backbone => 1,
            ComponentKind::Adapter => 2,
            ComponentKind::Decoder => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComponentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown part {s:?}; valid parts are encoder, backbone, adapter, decoder"
                ))
            })
    }
}

/// Set of component kinds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PartSet([bool; 4]);

impl PartSet {
    pub fn none() -> Self {
        PartSet::default()
    }

    pub fn of(kinds: &[ComponentKind]) -> Self {
        let mut s = PartSet::default();
        for &k in kinds {
            s.0[k.tag() as usize] = true;
        }
        s
    }

    /// Parses `parts_to_train` names; rejects unknown names and empty lists.
    pub fn parse<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config(
                "parts_to_train is empty; name at least one of encoder, backbone, adapter, decoder"
                    .into(),
            ));
        }
        let kinds = names
            .iter()
            .map(|n| n.as_ref().parse())
            .collect::<Result<Vec<ComponentKind>>>()?;
        Ok(Self::of(&kinds))
    }

    pub fn contains(&self, k: ComponentKind) -> bool {
        self.0[k.tag() as usize]
    }

    pub fn kinds(&self) -> impl Iterator<Item = ComponentKind> + '_ {
        ComponentKind::ALL.into_iter().filter(|k| self.contains(*k))
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }
}

/// Per-forward settings shared by every component in a chain.
#[derive(Clone, Copy)]
pub struct Pass<'p> {
    /// Training mode: adapter dropout is active.
    pub train: bool,
    /// Parts whose parameters receive gradients.
    pub grads_for: PartSet,
    /// Adapter consulted by the backbone's named linears.
    pub adapter: Option<&'p LoraAdapter>,
    /// Keys for dropout streams.
    pub seed: u64,
    pub step: u64,
}

impl<'p> Pass<'p> {
    pub fn eval() -> Self {
        Pass {
            train: false,
            grads_for: PartSet::none(),
            adapter: None,
            seed: 0,
            step: 0,
        }
    }

    pub fn with_adapter(mut self, adapter: Option<&'p LoraAdapter>) -> Self {
        self.adapter = adapter;
        self
    }

    /// Registers `p` as a graph leaf keyed `"<kind>.<path>"`.
    pub fn param(&self, g: &mut Graph<'p>, kind: ComponentKind, path: &str, p: &'p Param) -> Var {
        g.param(|| param_key(kind, path), p, self.grads_for.contains(kind))
    }
}

/// Gradient key for a component parameter.
pub fn param_key(kind: ComponentKind, path: &str) -> String {
    format!("{kind}.{path}")
}

/// Uniform interface: `postprocess(forward(preprocess(x)))`, plus the
/// parameters the component owns.
///
/// `trainable_parameters` names exactly the entries that training this part
/// may change.
pub trait Component: Send + Sync {
    fn kind(&self) -> ComponentKind;

    /// Registered type name, e.g. `"mlp"` or `"linear_channel_combiner"`.
    fn type_name(&self) -> &'static str;

    fn name(&self) -> &str;

    fn set_name(&mut self, name: String);

    /// Canonical configuration; enough to rebuild the component with
    /// freshly initialized parameters.
    fn config(&self) -> serde_json::Value;

    fn parameters(&self) -> &ParameterSet;

    fn parameters_mut(&mut self) -> &mut ParameterSet;

    fn trainable_parameters(&self) -> Vec<String> {
        self.parameters().trainable_names()
    }

    fn preprocess<'p>(&'p self, _g: &mut Graph<'p>, x: Var) -> Result<Var> {
        Ok(x)
    }

    fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var, pass: &Pass<'p>) -> Result<Var>;

    fn postprocess<'p>(&'p self, _g: &mut Graph<'p>, y: Var) -> Result<Var> {
        Ok(y)
    }

    fn run<'p>(&'p self, g: &mut Graph<'p>, x: Var, pass: &Pass<'p>) -> Result<Var> {
        let x = self.preprocess(g, x)?;
        let y = self.forward(g, x, pass)?;
        self.postprocess(g, y)
    }
}

//! LoRA adapters on the backbone's named linears.
//!
//! A matched linear computes `y = Wx + b + scale·B·(A·drop(x))` with
//! `scale = α/r`. `B` starts at zero, so a fresh adapter leaves the host
//! function untouched.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::component::{Component, ComponentKind, Pass};
use crate::error::{Error, Result};
use crate::numerics::{kernels, Graph, Var};
use crate::params::{Param, ParameterSet};
use crate::rng;
use crate::tensor::Tensor;

const A_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub r: usize,
    pub lora_alpha: f64,
    pub target_modules: Vec<String>,
    #[serde(default)]
    pub lora_dropout: f64,
    /// Seeds the `A` initialization.
    #[serde(default)]
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            r: 64,
            lora_alpha: 32.0,
            target_modules: vec!["q".into(), "v".into()],
            lora_dropout: 0.05,
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Config("LoRA rank r must be ≥ 1".into()));
        }
        if !(self.lora_alpha > 0.0) || !self.lora_alpha.is_finite() {
            return Err(Error::Config(format!("lora_alpha must be > 0, got {}", self.lora_alpha)));
        }
        if self.target_modules.is_empty() {
            return Err(Error::Config("target_modules is empty".into()));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(Error::Config(format!(
                "lora_dropout must be in [0, 1), got {}",
                self.lora_dropout
            )));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.lora_alpha / self.r as f64
    }
}

/// One adapted linear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoraSite {
    pub path: String,
    pub d_in: usize,
    pub d_out: usize,
    a_key: String,
    b_key: String,
}

impl LoraSite {
    pub fn a_path(&self) -> &str {
        &self.a_key
    }

    pub fn b_path(&self) -> &str {
        &self.b_key
    }
}

#[derive(Clone)]
pub struct LoraAdapter {
    name: String,
    cfg: LoraConfig,
    sites: IndexMap<String, LoraSite>,
    params: ParameterSet,
    // host weights saved by `merge`, restored by `unmerge`
    merged: Option<Vec<(String, Tensor)>>,
}

impl std::fmt::Debug for LoraAdapter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoraAdapter")
            .field("name", &self.name)
            .field("cfg", &self.cfg)
            .field("sites", &self.sites.keys().collect::<Vec<_>>())
            .field("merged", &self.merged.is_some())
            .finish()
    }
}

impl LoraAdapter {
    /// Matches `cfg.target_modules` against the backbone's linears and
    /// allocates `A ~ N(0, 0.02²)`, `B = 0` for each match.
    pub fn attach(backbone: &Backbone, cfg: LoraConfig) -> Result<Self> {
        cfg.validate()?;
        for t in &cfg.target_modules {
            if !backbone.named_linears().iter().any(|l| l.suffix() == t) {
                let available: Vec<&str> = backbone.named_linears().iter().map(|l| l.path.as_str()).collect();
                return Err(Error::Config(format!(
                    "target module {t:?} matches no backbone linear; available: {}",
                    available.join(", ")
                )));
            }
        }
        let mut sites = IndexMap::new();
        let mut params = ParameterSet::new();
        for lin in backbone.named_linears() {
            if !cfg.target_modules.iter().any(|t| t == lin.suffix()) {
                continue;
            }
            let site = LoraSite {
                path: lin.path.clone(),
                d_in: lin.d_in,
                d_out: lin.d_out,
                a_key: format!("{}.lora_a", lin.path),
                b_key: format!("{}.lora_b", lin.path),
            };
            let a = rng::gaussian([cfg.r, lin.d_in], A_STD, &[cfg.seed, rng::label(&site.a_key)]);
            params.insert(site.a_key.clone(), Param::new(a))?;
            params.insert(site.b_key.clone(), Param::new(Tensor::zeros([lin.d_out, cfg.r])))?;
            sites.insert(site.path.clone(), site);
        }
        Ok(LoraAdapter {
            name: "lora".into(),
            cfg,
            sites,
            params,
            merged: None,
        })
    }

    /// Rebuilds an adapter from stored `A`/`B` matrices, one
    /// `<path>.lora_a` / `<path>.lora_b` pair per site.
    pub fn from_parts(cfg: LoraConfig, params: ParameterSet) -> Result<Self> {
        cfg.validate()?;
        let mut sites = IndexMap::new();
        for (name, p) in params.iter() {
            let Some(path) = name.strip_suffix(".lora_a") else {
                if name.ends_with(".lora_b") {
                    continue;
                }
                return Err(Error::Format(format!("unexpected adapter parameter {name:?}")));
            };
            let b_key = format!("{path}.lora_b");
            let b = params
                .get(&b_key)
                .ok_or_else(|| Error::Format(format!("adapter site {path} has no lora_b")))?;
            let (a, b) = (p.value.shape(), b.value.shape());
            if a.len() != 2 || b.len() != 2 || a[0] != cfg.r || b[1] != cfg.r {
                return Err(Error::Format(format!(
                    "adapter site {path} has shapes A {a:?}, B {b:?} for rank {}",
                    cfg.r
                )));
            }
            sites.insert(
                path.to_string(),
                LoraSite {
                    path: path.to_string(),
                    d_in: a[1],
                    d_out: b[0],
                    a_key: name.to_string(),
                    b_key,
                },
            );
        }
        if sites.len() * 2 != params.len() {
            return Err(Error::Format("adapter has unpaired lora_b matrices".into()));
        }
        Ok(LoraAdapter {
            name: "lora".into(),
            cfg,
            sites,
            params,
            merged: None,
        })
    }

    pub fn lora_config(&self) -> &LoraConfig {
        &self.cfg
    }

    pub fn scale(&self) -> f64 {
        self.cfg.scale()
    }

    pub fn sites(&self) -> impl Iterator<Item = &LoraSite> {
        self.sites.values()
    }

    pub fn is_merged(&self) -> bool {
        self.merged.is_some()
    }

    /// Checks that every site exists on `backbone` with the same shape.
    pub fn check_host(&self, backbone: &Backbone) -> Result<()> {
        for s in self.sites.values() {
            let ok = backbone
                .named_linears()
                .iter()
                .any(|l| l.path == s.path && l.d_in == s.d_in && l.d_out == s.d_out);
            if !ok {
                return Err(Error::Shape(format!(
                    "adapter site {} [{}→{}] has no matching linear on this backbone",
                    s.path, s.d_in, s.d_out
                )));
            }
        }
        Ok(())
    }

    /// Low-rank contribution for the linear at `path`, or `None` when the
    /// path is not adapted or the delta is already folded into the host.
    pub fn delta<'p>(&'p self, g: &mut Graph<'p>, x: Var, path: &str, pass: &Pass<'p>) -> Result<Option<Var>> {
        if self.merged.is_some() {
            return Ok(None);
        }
        let Some(site) = self.sites.get(path) else {
            return Ok(None);
        };
        let xin = if pass.train && self.cfg.lora_dropout > 0.0 {
            let mask = dropout_mask(g.shape(x), self.cfg.lora_dropout, &[pass.seed, rng::label(&site.path), pass.step]);
            let m = g.constant(mask);
            g.mul(x, m)?
        } else {
            x
        };
        let a = pass.param(g, ComponentKind::Adapter, &site.a_key, self.params.expect(&site.a_key));
        let b = pass.param(g, ComponentKind::Adapter, &site.b_key, self.params.expect(&site.b_key));
        let h = g.linear(xin, a, None)?;
        let d = g.linear(h, b, None)?;
        Ok(Some(g.scale(d, self.scale())))
    }

    /// Folds `scale·B·A` into each host weight.
    pub fn merge(&mut self, backbone: &mut Backbone) -> Result<()> {
        if self.merged.is_some() {
            return Err(Error::State(format!("adapter {:?} is already merged", self.name)));
        }
        self.check_host(backbone)?;
        let mut saved = Vec::with_capacity(self.sites.len());
        for s in self.sites.values() {
            let wk = format!("{}.weight", s.path);
            let w = backbone.parameters().expect(&wk).value.clone();
            let a = &self.params.expect(&s.a_key).value;
            let b = &self.params.expect(&s.b_key).value;
            let ba = kernels::matmul(b, a)?;
            let scale = self.scale();
            let mut merged = w.clone();
            for (m, d) in merged.data_mut().iter_mut().zip(ba.data()) {
                *m += scale * d;
            }
            backbone.parameters_mut().assign(&wk, merged)?;
            saved.push((wk, w));
        }
        self.merged = Some(saved);
        Ok(())
    }

    /// Restores the host weights saved by `merge`, bit for bit.
    pub fn unmerge(&mut self, backbone: &mut Backbone) -> Result<()> {
        let Some(saved) = self.merged.take() else {
            return Err(Error::State(format!("adapter {:?} is not merged", self.name)));
        };
        for (wk, w) in saved {
            backbone.parameters_mut().assign(&wk, w)?;
        }
        Ok(())
    }
}

fn dropout_mask(shape: &[usize], p: f64, keys: &[u64]) -> Tensor {
    let mut r = rng::stream(&[rng::label("lora_dropout"), rng::mix(keys)]);
    let keep = 1.0 / (1.0 - p);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if r.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

impl Component for LoraAdapter {
    fn kind(&self) -> ComponentKind {
        ComponentKind::Adapter
    }
    fn type_name(&self) -> &'static str {
        "lora"
    }
    fn name(&self) -> &str {
        &self.name
    }
    fn set_name(&mut self, name: String) {
        self.name = name;
    }
    fn config(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("plain struct")
    }
    fn parameters(&self) -> &ParameterSet {
        &self.params
    }
    fn parameters_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Identity. The adapter acts inside the backbone's linears.
    fn forward<'p>(&'p self, _g: &mut Graph<'p>, x: Var, _pass: &Pass<'p>) -> Result<Var> {
        Ok(x)
    }
}

/// The adapter's trainable `A`/`B` matrices.
pub fn adapter_trainable_parameters(adapter: &LoraAdapter) -> ParameterSet {
    let mut out = ParameterSet::new();
    for name in adapter.trainable_parameters() {
        out.upsert(name.clone(), adapter.parameters().expect(&name).clone());
    }
    out
}

//! Reference backbone: a seeded patch-embedding transformer encoder.
//!
//! Each channel of each item is an independent series. A length-`L` series
//! is cut into `T = L/p` patches, embedded to width `E`, given a learned
//! positional embedding and passed through `N` pre-norm blocks
//! (LN → multi-head attention → residual, LN → GELU FFN → residual).
//! The output is the token-resolved embedding `[B, C, T, E]`.
//!
//! Every linear layer has a dotted path (`layers.0.attn.q`, `patch_embed`,
//! ...). Adapters target linears by the final path segment.

use serde::{Deserialize, Serialize};

use crate::batch::{EmbeddingTensor, TimeSeriesBatch};
use crate::component::{Component, ComponentKind, Pass};
use crate::encoders::InputSpec;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Var};
use crate::params::{Param, ParameterSet};
use crate::rng;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub patch_len: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    /// Longest series accepted; sizes the positional table to
    /// `context_len / patch_len` rows.
    pub context_len: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub frozen: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            patch_len: 16,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            ffn_mult: 4,
            context_len: 64,
            seed: 0,
            frozen: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_len == 0 || self.num_layers == 0 || self.num_heads == 0 || self.ffn_mult == 0 {
            return bad("patch_len, num_layers, num_heads and ffn_mult must be ≥ 1".into());
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.context_len < self.patch_len {
            return bad(format!(
                "context_len {} shorter than one patch ({})",
                self.context_len, self.patch_len
            ));
        }
        Ok(())
    }

    pub fn max_tokens(&self) -> usize {
        self.context_len / self.patch_len
    }

    /// Token count for a series of length `len`.
    pub fn tokens_for(&self, len: usize) -> Result<usize> {
        if !len.is_multiple_of(self.patch_len) {
            return shape_err(format!(
                "series length L={len} is not divisible by patch length p={}",
                self.patch_len
            ));
        }
        let t = len / self.patch_len;
        if t == 0 || t > self.max_tokens() {
            return shape_err(format!(
                "series length L={len} gives {t} tokens; the backbone accepts 1..={} (context_len {})",
                self.max_tokens(),
                self.context_len
            ));
        }
        Ok(t)
    }
}

/// A linear layer inside the backbone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NamedLinear {
    pub path: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl NamedLinear {
    pub fn weight_path(&self) -> String {
        format!("{}.weight", self.path)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.bias", self.path)
    }

    /// Final dotted segment, the name adapters match against.
    pub fn suffix(&self) -> &str {
        self.path.rsplit('.').next().unwrap_or(&self.path)
    }
}

struct LayerPaths {
    ln1_gain: String,
    ln1_shift: String,
    q: String,
    k: String,
    v: String,
    o: String,
    ln2_gain: String,
    ln2_shift: String,
    ffn_in: String,
    ffn_out: String,
}

impl LayerPaths {
    fn new(i: usize) -> Self {
        LayerPaths {
            ln1_gain: format!("layers.{i}.ln1.gain"),
            ln1_shift: format!("layers.{i}.ln1.shift"),
            q: format!("layers.{i}.attn.q"),
            k: format!("layers.{i}.attn.k"),
            v: format!("layers.{i}.attn.v"),
            o: format!("layers.{i}.attn.o"),
            ln2_gain: format!("layers.{i}.ln2.gain"),
            ln2_shift: format!("layers.{i}.ln2.shift"),
            ffn_in: format!("layers.{i}.ffn.ffn_in"),
            ffn_out: format!("layers.{i}.ffn.ffn_out"),
        }
    }
}

/// See the module docs.
pub struct Backbone {
    name: String,
    cfg: BackboneConfig,
    params: ParameterSet,
    linears: Vec<NamedLinear>,
    layers: Vec<LayerPaths>,
    // "<path>.weight" / "<path>.bias" per linear, indexed like `linears`
    linear_keys: Vec<(String, String)>,
}

impl Clone for Backbone {
    fn clone(&self) -> Self {
        Backbone {
            name: self.name.clone(),
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            linears: self.linears.clone(),
            layers: (0..self.cfg.num_layers).map(LayerPaths::new).collect(),
            linear_keys: self.linear_keys.clone(),
        }
    }
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone")
            .field("name", &self.name)
            .field("cfg", &self.cfg)
            .field("parameters", &self.params.scalar_count())
            .finish()
    }
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let (p, e) = (cfg.patch_len, cfg.embed_dim);
        let hidden = cfg.ffn_mult * e;
        let mut linears = vec![NamedLinear {
            path: "patch_embed".into(),
            d_in: p,
            d_out: e,
        }];
        let layers: Vec<LayerPaths> = (0..cfg.num_layers).map(LayerPaths::new).collect();
        for l in &layers {
            for path in [&l.q, &l.k, &l.v, &l.o] {
                linears.push(NamedLinear {
                    path: path.clone(),
                    d_in: e,
                    d_out: e,
                });
            }
            linears.push(NamedLinear {
                path: l.ffn_in.clone(),
                d_in: e,
                d_out: hidden,
            });
            linears.push(NamedLinear {
                path: l.ffn_out.clone(),
                d_in: hidden,
                d_out: e,
            });
        }

        let seed = cfg.seed;
        let gauss = |shape: Vec<usize>, path: &str| rng::gaussian(shape, INIT_STD, &[seed, rng::label(path)]);
        let mut params = ParameterSet::new();
        let add_linear = |params: &mut ParameterSet, lin: &NamedLinear| -> Result<()> {
            params.insert(lin.weight_path(), Param::new(gauss(vec![lin.d_out, lin.d_in], &lin.weight_path())))?;
            params.insert(lin.bias_path(), Param::new(Tensor::zeros([lin.d_out])))
        };
        add_linear(&mut params, &linears[0])?;
        params.insert("pos_embed", Param::new(gauss(vec![cfg.max_tokens(), e], "pos_embed")))?;
        for (i, l) in layers.iter().enumerate() {
            params.insert(l.ln1_gain.clone(), Param::new(Tensor::full([e], 1.0)))?;
            params.insert(l.ln1_shift.clone(), Param::new(Tensor::zeros([e])))?;
            for lin in &linears[1 + i * 6..1 + i * 6 + 4] {
                add_linear(&mut params, lin)?;
            }
            params.insert(l.ln2_gain.clone(), Param::new(Tensor::full([e], 1.0)))?;
            params.insert(l.ln2_shift.clone(), Param::new(Tensor::zeros([e])))?;
            for lin in &linears[1 + i * 6 + 4..1 + i * 6 + 6] {
                add_linear(&mut params, lin)?;
            }
        }
        params.set_frozen(cfg.frozen);
        let linear_keys = linears.iter().map(|l| (l.weight_path(), l.bias_path())).collect();
        Ok(Backbone {
            name: "reference_transformer".into(),
            cfg,
            params,
            linears,
            layers,
            linear_keys,
        })
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Every linear layer, in construction order.
    pub fn named_linears(&self) -> &[NamedLinear] {
        &self.linears
    }

    pub fn is_frozen(&self) -> bool {
        self.cfg.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.cfg.frozen = frozen;
        self.params.set_frozen(frozen);
    }

    /// `[T, E]` for an input spec, without running data.
    pub fn output_spec(&self, input: InputSpec) -> Result<(usize, usize)> {
        Ok((self.cfg.tokens_for(input.length)?, self.cfg.embed_dim))
    }

    /// Runs the backbone on a batch in eval mode.
    pub fn embed(&self, batch: &TimeSeriesBatch, pass: &Pass<'_>) -> Result<EmbeddingTensor> {
        let mut g = Graph::inference();
        let x = g.input(batch.values());
        let pass = Pass {
            train: false,
            grads_for: crate::component::PartSet::none(),
            ..*pass
        };
        let y = self.run(&mut g, x, &pass)?;
        EmbeddingTensor::new(g.into_value(y))
    }

    fn site<'p>(&'p self, g: &mut Graph<'p>, x: Var, idx: usize, pass: &Pass<'p>) -> Result<Var> {
        let (wk, bk) = &self.linear_keys[idx];
        let w = pass.param(g, ComponentKind::Backbone, wk, self.params.expect(wk));
        let b = pass.param(g, ComponentKind::Backbone, bk, self.params.expect(bk));
        let y = g.linear(x, w, Some(b))?;
        match pass.adapter {
            Some(ad) => match ad.delta(g, x, &self.linears[idx].path, pass)? {
                Some(d) => g.add(y, d),
                None => Ok(y),
            },
            None => Ok(y),
        }
    }

    fn ln<'p>(&'p self, g: &mut Graph<'p>, x: Var, gain: &str, shift: &str, pass: &Pass<'p>) -> Result<Var> {
        let gv = pass.param(g, ComponentKind::Backbone, gain, self.params.expect(gain));
        let sv = pass.param(g, ComponentKind::Backbone, shift, self.params.expect(shift));
        g.layernorm(x, gv, sv, LN_EPS)
    }
}

impl Component for Backbone {
    fn kind(&self) -> ComponentKind {
        ComponentKind::Backbone
    }
    fn type_name(&self) -> &'static str {
        "reference_transformer"
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

    /// `[B, C, L] → [B, C, T, p]`: the channel-flattened `[B·C, L]` view cut
    /// into patches. Row-major memory is identical to `[B·C, T, p]`.
    fn preprocess<'p>(&'p self, g: &mut Graph<'p>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 {
            return shape_err(format!("backbone expects [B, C, L], got {s:?}"));
        }
        if !g.value(x).all_finite() {
            return Err(Error::Input("backbone input contains non-finite values".into()));
        }
        let t = self.cfg.tokens_for(s[2])?;
        g.reshape(x, [s[0], s[1], t, self.cfg.patch_len])
    }

    fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var, pass: &Pass<'p>) -> Result<Var> {
        let mut h = self.site(g, x, 0, pass)?;
        let pos = pass.param(g, ComponentKind::Backbone, "pos_embed", self.params.expect("pos_embed"));
        h = g.add_positional(h, pos)?;
        for (i, l) in self.layers.iter().enumerate() {
            let base = 1 + i * 6;
            let a = self.ln(g, h, &l.ln1_gain, &l.ln1_shift, pass)?;
            let q = self.site(g, a, base, pass)?;
            let k = self.site(g, a, base + 1, pass)?;
            let v = self.site(g, a, base + 2, pass)?;
            let att = g.attention(q, k, v, self.cfg.num_heads)?;
            let o = self.site(g, att, base + 3, pass)?;
            h = g.add(h, o)?;
            let b = self.ln(g, h, &l.ln2_gain, &l.ln2_shift, pass)?;
            let f = self.site(g, b, base + 4, pass)?;
            let f = g.gelu(f);
            let f = self.site(g, f, base + 5, pass)?;
            h = g.add(h, f)?;
        }
        Ok(h)
    }
}

/// Embeds a batch with the given backbone: `[B, C, L] → [B, C, L/p, E]`.
pub fn backbone_forward(backbone: &Backbone, batch: &TimeSeriesBatch) -> Result<EmbeddingTensor> {
    backbone.embed(batch, &Pass::eval())
}

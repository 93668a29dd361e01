//! Input-side components: they reshape raw series into what the backbone
//! expects. Every encoder maps `[B, C, L]` to a valid `[B', C', L']` batch.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::batch::TimeSeriesBatch;
use crate::component::{Component, ComponentKind, Pass};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Var};
use crate::params::{Param, ParameterSet};
use crate::tensor::Tensor;

/// Channel count and series length of a batch, used for dry-run validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub length: usize,
}

/// Origin of every output row of a batch-expanding encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowIndex {
    /// `(item, start)` per output row, item-major.
    pub origins: Vec<(usize, usize)>,
    pub items: usize,
}

impl WindowIndex {
    pub fn items_of_rows(&self) -> Vec<usize> {
        self.origins.iter().map(|&(i, _)| i).collect()
    }

    /// Averages per-window rows `[B·n, D]` back to per-item rows `[B, D]`.
    pub fn reassemble_mean(&self, rows: &Tensor) -> Result<Tensor> {
        if rows.rank() != 2 || rows.shape()[0] != self.origins.len() {
            return shape_err(format!(
                "{} window rows expected, got {:?}",
                self.origins.len(),
                rows.shape()
            ));
        }
        let d = rows.shape()[1];
        let mut out = vec![0.0; self.items * d];
        let mut counts = vec![0usize; self.items];
        for (r, &(item, _)) in self.origins.iter().enumerate() {
            counts[item] += 1;
            for (o, v) in out[item * d..(item + 1) * d].iter_mut().zip(rows.row(r)) {
                *o += v;
            }
        }
        for (item, &c) in counts.iter().enumerate() {
            for o in &mut out[item * d..(item + 1) * d] {
                *o /= c.max(1) as f64;
            }
        }
        Tensor::new([self.items, d], out)
    }
}

pub trait Encoder: Component {
    /// Output channel count and length for a given input, without data.
    fn output_spec(&self, input: InputSpec) -> Result<InputSpec>;

    /// Row provenance when the encoder changes the batch size.
    fn window_index(&self, _batch: usize, _length: usize) -> Option<WindowIndex> {
        None
    }

    fn clone_box(&self) -> Box<dyn Encoder>;
}

impl Clone for Box<dyn Encoder> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Passes batches through untouched.
#[derive(Clone, Debug)]
pub struct IdentityEncoder {
    name: String,
    params: ParameterSet,
}

impl IdentityEncoder {
    pub fn new() -> Self {
        IdentityEncoder {
            name: "identity".into(),
            params: ParameterSet::new(),
        }
    }
}

impl Default for IdentityEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Component for IdentityEncoder {
    fn kind(&self) -> ComponentKind {
        ComponentKind::Encoder
    }
    fn type_name(&self) -> &'static str {
        "identity"
    }
    fn name(&self) -> &str {
        &self.name
    }
    fn set_name(&mut self, name: String) {
        self.name = name;
    }
    fn config(&self) -> serde_json::Value {
        json!({})
    }
    fn parameters(&self) -> &ParameterSet {
        &self.params
    }
    fn parameters_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }
    fn forward<'p>(&'p self, _g: &mut Graph<'p>, x: Var, _pass: &Pass<'p>) -> Result<Var> {
        Ok(x)
    }
}

impl Encoder for IdentityEncoder {
    fn output_spec(&self, input: InputSpec) -> Result<InputSpec> {
        Ok(input)
    }
    fn clone_box(&self) -> Box<dyn Encoder> {
        Box::new(self.clone())
    }
}

/// The identity encoder as a plain function.
pub fn identity_encoder(batch: &TimeSeriesBatch) -> TimeSeriesBatch {
    batch.clone()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearChannelCombinerConfig {
    pub num_channels: usize,
    pub new_num_channels: usize,
}

/// Learned linear map across channels, `C_in → C_out`, applied at every
/// time step. Starts as a channel average (weights `1/C_in`, bias 0).
#[derive(Clone, Debug)]
pub struct LinearChannelCombiner {
    name: String,
    cfg: LinearChannelCombinerConfig,
    params: ParameterSet,
}

impl LinearChannelCombiner {
    pub fn new(cfg: LinearChannelCombinerConfig) -> Result<Self> {
        if cfg.num_channels == 0 || cfg.new_num_channels == 0 {
            return Err(Error::Config(format!(
                "channel counts must be ≥ 1, got {} → {}",
                cfg.num_channels, cfg.new_num_channels
            )));
        }
        let (ci, co) = (cfg.num_channels, cfg.new_num_channels);
        let mut params = ParameterSet::new();
        params.insert("weight", Param::new(Tensor::full([co, ci], 1.0 / ci as f64)))?;
        params.insert("bias", Param::new(Tensor::zeros([co])))?;
        Ok(LinearChannelCombiner {
            name: "linear_channel_combiner".into(),
            cfg,
            params,
        })
    }

    pub fn config_values(&self) -> LinearChannelCombinerConfig {
        self.cfg
    }
}

impl Component for LinearChannelCombiner {
    fn kind(&self) -> ComponentKind {
        ComponentKind::Encoder
    }
    fn type_name(&self) -> &'static str {
        "linear_channel_combiner"
    }
    fn name(&self) -> &str {
        &self.name
    }
    fn set_name(&mut self, name: String) {
        self.name = name;
    }
    fn config(&self) -> serde_json::Value {
        serde_json::to_value(self.cfg).expect("plain struct")
    }
    fn parameters(&self) -> &ParameterSet {
        &self.params
    }
    fn parameters_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn preprocess<'p>(&'p self, g: &mut Graph<'p>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] != self.cfg.num_channels {
            return shape_err(format!(
                "channel combiner expects {} input channels, got input {s:?}",
                self.cfg.num_channels
            ));
        }
        Ok(x)
    }

    fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var, pass: &Pass<'p>) -> Result<Var> {
        let w = pass.param(g, ComponentKind::Encoder, "weight", self.params.expect("weight"));
        let b = pass.param(g, ComponentKind::Encoder, "bias", self.params.expect("bias"));
        g.channel_mix(x, w, b)
    }
}

impl Encoder for LinearChannelCombiner {
    fn output_spec(&self, input: InputSpec) -> Result<InputSpec> {
        if input.channels != self.cfg.num_channels {
            return shape_err(format!(
                "channel combiner expects {} input channels, data has {}",
                self.cfg.num_channels, input.channels
            ));
        }
        Ok(InputSpec {
            channels: self.cfg.new_num_channels,
            length: input.length,
        })
    }
    fn clone_box(&self) -> Box<dyn Encoder> {
        Box::new(self.clone())
    }
}

fn run_encoder(enc: &dyn Encoder, batch: &TimeSeriesBatch) -> Result<Tensor> {
    let mut g = Graph::inference();
    let x = g.input(batch.values());
    let y = enc.run(&mut g, x, &Pass::eval())?;
    Ok(g.into_value(y))
}

/// `out[b, c', l] = Σ_c W[c', c]·x[b, c, l] + bias[c']` as a plain function.
pub fn linear_channel_combine(batch: &TimeSeriesBatch, weights: &Tensor, bias: &Tensor) -> Result<TimeSeriesBatch> {
    if weights.rank() != 2 {
        return shape_err(format!("weights must be [C_out, C_in], got {:?}", weights.shape()));
    }
    let mut enc = LinearChannelCombiner::new(LinearChannelCombinerConfig {
        num_channels: weights.shape()[1],
        new_num_channels: weights.shape()[0],
    })?;
    enc.params.assign("weight", weights.clone())?;
    enc.params.assign("bias", bias.clone())?;
    let values = run_encoder(&enc, batch)?;
    TimeSeriesBatch::with_parts(values, batch.targets().cloned(), None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window_len: usize,
    pub stride: usize,
}

impl WindowConfig {
    pub fn windows_for(&self, length: usize) -> Result<usize> {
        if self.window_len == 0 || self.stride == 0 {
            return Err(Error::Config("window_len and stride must be ≥ 1".into()));
        }
        if self.window_len > length {
            return Err(Error::Config(format!(
                "window_len {} exceeds series length {length}",
                self.window_len
            )));
        }
        Ok((length - self.window_len) / self.stride + 1)
    }
}

/// Cuts each series into windows `[j·s, j·s + w)`; a tail shorter than `w`
/// is dropped.
#[derive(Clone, Debug)]
pub struct WindowEncoder {
    name: String,
    cfg: WindowConfig,
    params: ParameterSet,
}

impl WindowEncoder {
    pub fn new(cfg: WindowConfig) -> Result<Self> {
        if cfg.window_len == 0 || cfg.stride == 0 {
            return Err(Error::Config("window_len and stride must be ≥ 1".into()));
        }
        Ok(WindowEncoder {
            name: "window".into(),
            cfg,
            params: ParameterSet::new(),
        })
    }
}

impl Component for WindowEncoder {
    fn kind(&self) -> ComponentKind {
        ComponentKind::Encoder
    }
    fn type_name(&self) -> &'static str {
        "window"
    }
    fn name(&self) -> &str {
        &self.name
    }
    fn set_name(&mut self, name: String) {
        self.name = name;
    }
    fn config(&self) -> serde_json::Value {
        serde_json::to_value(self.cfg).expect("plain struct")
    }
    fn parameters(&self) -> &ParameterSet {
        &self.params
    }
    fn parameters_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }
    fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var, _pass: &Pass<'p>) -> Result<Var> {
        g.windows(x, self.cfg.window_len, self.cfg.stride)
    }
}

impl Encoder for WindowEncoder {
    fn output_spec(&self, input: InputSpec) -> Result<InputSpec> {
        self.cfg.windows_for(input.length)?;
        Ok(InputSpec {
            channels: input.channels,
            length: self.cfg.window_len,
        })
    }

    fn window_index(&self, batch: usize, length: usize) -> Option<WindowIndex> {
        let n = self.cfg.windows_for(length).ok()?;
        let origins = (0..batch)
            .flat_map(|b| (0..n).map(move |j| (b, j * self.cfg.stride)))
            .collect();
        Some(WindowIndex {
            origins,
            items: batch,
        })
    }

    fn clone_box(&self) -> Box<dyn Encoder> {
        Box::new(self.clone())
    }
}

/// Windows a batch and returns the row provenance map. Targets are repeated
/// per window.
pub fn window_encoder(batch: &TimeSeriesBatch, cfg: WindowConfig) -> Result<(TimeSeriesBatch, WindowIndex)> {
    let enc = WindowEncoder::new(cfg)?;
    enc.output_spec(InputSpec {
        channels: batch.channels(),
        length: batch.length(),
    })?;
    let values = run_encoder(&enc, batch)?;
    let index = enc
        .window_index(batch.batch_size(), batch.length())
        .expect("validated above");
    let targets = batch
        .targets()
        .map(|t| t.gather(&index.items_of_rows()))
        .transpose()?;
    let mask = match batch.mask() {
        Some(m) => {
            let mut g = Graph::inference();
            let mv = g.input(m);
            let w = g.windows(mv, cfg.window_len, cfg.stride)?;
            Some(g.into_value(w))
        }
        None => None,
    };
    Ok((TimeSeriesBatch::with_parts(values, targets, mask)?, index))
}

pub const ENCODER_TYPES: [&str; 3] = ["identity", "linear_channel_combiner", "window"];

/// Builds an encoder from its registered type name and JSON config.
pub fn build(type_name: &str, cfg: &serde_json::Value) -> Result<Box<dyn Encoder>> {
    let parse = |what: &str, e: serde_json::Error| Error::Config(format!("invalid {what} encoder config: {e}"));
    Ok(match type_name {
        "identity" => Box::new(IdentityEncoder::new()),
        "linear_channel_combiner" => Box::new(LinearChannelCombiner::new(
            serde_json::from_value(cfg.clone()).map_err(|e| parse(type_name, e))?,
        )?),
        "window" => Box::new(WindowEncoder::new(
            serde_json::from_value(cfg.clone()).map_err(|e| parse(type_name, e))?,
        )?),
        other => {
            return Err(Error::Registry(format!(
                "unknown encoder type {other:?}; known: {}",
                ENCODER_TYPES.join(", ")
            )))
        }
    })
}

//! The pipeline: one backbone plus optional encoder, adapter and decoder
//! slots, a registry of staged components, selective training, prediction
//! and runtime switching.
//!
//! ```
//! use tsfm_kit::prelude::*;
//!
//! let backbone = Backbone::new(BackboneConfig::default()).unwrap();
//! let mut p = Pipeline::new(backbone);
//! let mlp = MlpDecoder::new(MlpDecoderConfig { input_dim: 32, output_dim: 1, hidden_dim: 8, seed: 0 }).unwrap();
//! p.add_decoder(mlp, true).unwrap();
//! assert_eq!(p.active_name(ComponentKind::Decoder), Some("mlp"));
//! ```

pub mod persist;

use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::adapters::{LoraAdapter, LoraConfig};
use crate::backbone::Backbone;
use crate::batch::{TimeSeriesBatch, Targets};
use crate::component::{Component, ComponentKind, PartSet, Pass};
use crate::decoders::{not_fitted, preprocess_graph, Decoder, DecoderMode};
use crate::encoders::{Encoder, InputSpec, WindowIndex};
use crate::error::{shape_err, Error, Result};
use crate::metrics::{MetricsCollector, Phase, RunMetrics};
use crate::numerics::{kernels, AdamConfig, AdamState, Graph, Var};
use crate::params::ParameterSet;
use crate::tensor::{alloc, Tensor};

pub use persist::{load_component, load_component_as, LoadedComponent, Precision};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
    Forecasting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
    Hinge,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    5
}
fn default_batch_size() -> usize {
    16
}

/// Training and prediction settings. `loss` defaults to MSE for regression
/// and forecasting, cross-entropy for classification.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: Task,
    #[serde(default)]
    pub loss: Option<LossKind>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Items per batch when a dataset is split into batches.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TaskConfig {
    pub fn new(task: Task) -> Self {
        TaskConfig {
            task,
            loss: None,
            lr: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss.unwrap_or(match self.task {
            Task::Classification => LossKind::CrossEntropy,
            Task::Regression | Task::Forecasting => LossKind::Mse,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = matches!(
            (self.task, self.loss_kind()),
            (Task::Regression | Task::Forecasting, LossKind::Mse)
                | (Task::Classification, LossKind::CrossEntropy | LossKind::Hinge)
        );
        if !ok {
            return Err(Error::Config(format!(
                "loss {:?} does not fit task {:?}",
                self.loss_kind(),
                self.task
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Outcome of [`Pipeline::train`].
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub mode: DecoderMode,
    /// Item-weighted mean loss per epoch; empty in fit mode.
    pub epoch_losses: Vec<f64>,
    pub elapsed_s: f64,
    /// Gradient keys (`"<kind>.<path>"`) that received updates.
    pub updated: Vec<String>,
    pub metrics: Vec<RunMetrics>,
}

/// Decoder outputs in input order.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictions {
    /// `[n, output_dim]`.
    Values(Tensor),
    Labels(Vec<usize>),
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Values(t) => t.rows(),
            Predictions::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Option<&Tensor> {
        match self {
            Predictions::Values(t) => Some(t),
            Predictions::Labels(_) => None,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Predictions::Labels(l) => Some(l),
            Predictions::Values(_) => None,
        }
    }

    pub fn bitwise_eq(&self, other: &Predictions) -> bool {
        match (self, other) {
            (Predictions::Values(a), Predictions::Values(b)) => a.bitwise_eq(b),
            (Predictions::Labels(a), Predictions::Labels(b)) => a == b,
            _ => false,
        }
    }
}

/// See the module docs.
#[derive(Clone)]
pub struct Pipeline {
    backbone: Arc<Backbone>,
    encoders: IndexMap<String, Box<dyn Encoder>>,
    adapters: IndexMap<String, LoraAdapter>,
    decoders: IndexMap<String, Box<dyn Decoder>>,
    active_encoder: Option<String>,
    active_adapter: Option<String>,
    active_decoder: Option<String>,
    input_spec: Option<InputSpec>,
    mode: Mode,
    metrics: Option<MetricsCollector>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("backbone", &self.backbone.name())
            .field("encoders", &self.encoders.keys().collect::<Vec<_>>())
            .field("adapters", &self.adapters.keys().collect::<Vec<_>>())
            .field("decoders", &self.decoders.keys().collect::<Vec<_>>())
            .field("active_encoder", &self.active_encoder)
            .field("active_adapter", &self.active_adapter)
            .field("active_decoder", &self.active_decoder)
            .finish()
    }
}

fn unknown_name<'a>(kind: ComponentKind, name: &str, known: impl Iterator<Item = &'a String>) -> Error {
    let known: Vec<&str> = known.map(String::as_str).collect();
    Error::Registry(format!(
        "no {kind} named {name:?}; registered: [{}]",
        known.join(", ")
    ))
}

fn duplicate(kind: ComponentKind, name: &str) -> Error {
    Error::Registry(format!("a {kind} named {name:?} is already registered"))
}

impl Pipeline {
    pub fn new(backbone: Backbone) -> Self {
        Self::from_shared(Arc::new(backbone))
    }

    /// Builds a pipeline over a backbone shared with other pipelines.
    /// Mutating the backbone (training it, merging an adapter) detaches a
    /// private copy first.
    pub fn from_shared(backbone: Arc<Backbone>) -> Self {
        Pipeline {
            backbone,
            encoders: IndexMap::new(),
            adapters: IndexMap::new(),
            decoders: IndexMap::new(),
            active_encoder: None,
            active_adapter: None,
            active_decoder: None,
            input_spec: None,
            mode: Mode::Eval,
            metrics: None,
        }
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn shared_backbone(&self) -> Arc<Backbone> {
        Arc::clone(&self.backbone)
    }

    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        if self.backbone.is_frozen() != frozen {
            Arc::make_mut(&mut self.backbone).set_frozen(frozen);
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn input_spec(&self) -> Option<InputSpec> {
        self.input_spec
    }

    /// Declares the raw input shape and validates the active chain against it.
    pub fn set_input_spec(&mut self, spec: InputSpec) -> Result<()> {
        self.check(
            self.encoder(),
            self.adapter(),
            self.decoder(),
            Some(spec),
        )?;
        self.input_spec = Some(spec);
        Ok(())
    }

    pub fn with_input_spec(mut self, spec: InputSpec) -> Result<Self> {
        self.set_input_spec(spec)?;
        Ok(self)
    }

    pub fn set_metrics(&mut self, collector: Option<MetricsCollector>) {
        self.metrics = collector;
    }

    pub fn metrics(&self) -> Option<&MetricsCollector> {
        self.metrics.as_ref()
    }

    // ---- registry ----------------------------------------------------------

    pub fn add_encoder<E: Encoder + 'static>(&mut self, encoder: E, load: bool) -> Result<String> {
        self.add_encoder_boxed(Box::new(encoder), load)
    }

    pub fn add_encoder_boxed(&mut self, encoder: Box<dyn Encoder>, load: bool) -> Result<String> {
        let name = encoder.name().to_string();
        if self.encoders.contains_key(&name) {
            return Err(duplicate(ComponentKind::Encoder, &name));
        }
        if load {
            self.check(Some(encoder.as_ref()), self.adapter(), self.decoder(), self.input_spec)?;
        }
        self.encoders.insert(name.clone(), encoder);
        if load {
            self.active_encoder = Some(name.clone());
        }
        Ok(name)
    }

    pub fn add_decoder<D: Decoder + 'static>(&mut self, decoder: D, load: bool) -> Result<String> {
        self.add_decoder_boxed(Box::new(decoder), load)
    }

    pub fn add_decoder_boxed(&mut self, decoder: Box<dyn Decoder>, load: bool) -> Result<String> {
        let name = decoder.name().to_string();
        if self.decoders.contains_key(&name) {
            return Err(duplicate(ComponentKind::Decoder, &name));
        }
        if load {
            self.check(self.encoder(), self.adapter(), Some(decoder.as_ref()), self.input_spec)?;
        }
        self.decoders.insert(name.clone(), decoder);
        if load {
            self.active_decoder = Some(name.clone());
        }
        Ok(name)
    }

    /// Attaches a fresh adapter to the backbone, registers it under the next
    /// free name (`lora`, `lora_2`, ...) and activates it.
    pub fn add_adapter(&mut self, cfg: LoraConfig) -> Result<String> {
        let mut adapter = LoraAdapter::attach(&self.backbone, cfg)?;
        let base = adapter.name().to_string();
        let mut name = base.clone();
        let mut i = 2;
        while self.adapters.contains_key(&name) {
            name = format!("{base}_{i}");
            i += 1;
        }
        adapter.set_name(name);
        self.add_adapter_instance(adapter, true)
    }

    pub fn add_adapter_instance(&mut self, adapter: LoraAdapter, load: bool) -> Result<String> {
        let name = adapter.name().to_string();
        if self.adapters.contains_key(&name) {
            return Err(duplicate(ComponentKind::Adapter, &name));
        }
        if adapter.is_merged() {
            return Err(Error::State(format!("adapter {name:?} is merged into another backbone")));
        }
        if load {
            self.ensure_unmerged()?;
            adapter.check_host(&self.backbone)?;
        }
        self.adapters.insert(name.clone(), adapter);
        if load {
            self.active_adapter = Some(name.clone());
        }
        Ok(name)
    }

    pub fn registered(&self, kind: ComponentKind) -> Vec<&str> {
        match kind {
            ComponentKind::Encoder => self.encoders.keys().map(String::as_str).collect(),
            ComponentKind::Adapter => self.adapters.keys().map(String::as_str).collect(),
            ComponentKind::Decoder => self.decoders.keys().map(String::as_str).collect(),
            ComponentKind::Backbone => vec![self.backbone.name()],
        }
    }

    pub fn active_name(&self, kind: ComponentKind) -> Option<&str> {
        match kind {
            ComponentKind::Encoder => self.active_encoder.as_deref(),
            ComponentKind::Adapter => self.active_adapter.as_deref(),
            ComponentKind::Decoder => self.active_decoder.as_deref(),
            ComponentKind::Backbone => Some(self.backbone.name()),
        }
    }

    pub fn encoder(&self) -> Option<&dyn Encoder> {
        self.active_encoder.as_ref().map(|n| self.encoders[n].as_ref())
    }

    pub fn adapter(&self) -> Option<&LoraAdapter> {
        self.active_adapter.as_ref().map(|n| &self.adapters[n])
    }

    pub fn decoder(&self) -> Option<&dyn Decoder> {
        self.active_decoder.as_ref().map(|n| self.decoders[n].as_ref())
    }

    pub fn encoder_mut(&mut self, name: &str) -> Option<&mut Box<dyn Encoder>> {
        self.encoders.get_mut(name)
    }

    pub fn adapter_mut(&mut self, name: &str) -> Option<&mut LoraAdapter> {
        self.adapters.get_mut(name)
    }

    pub fn decoder_mut(&mut self, name: &str) -> Option<&mut Box<dyn Decoder>> {
        self.decoders.get_mut(name)
    }

    /// Any registered component by kind and name.
    pub fn component(&self, kind: ComponentKind, name: &str) -> Option<&dyn Component> {
        match kind {
            ComponentKind::Encoder => self.encoders.get(name).map(|c| c.as_ref() as &dyn Component),
            ComponentKind::Adapter => self.adapters.get(name).map(|c| c as &dyn Component),
            ComponentKind::Decoder => self.decoders.get(name).map(|c| c.as_ref() as &dyn Component),
            ComponentKind::Backbone => (name == self.backbone.name()).then(|| self.backbone.as_ref() as &dyn Component),
        }
    }

    /// Parameters of the active component of `kind`.
    pub fn active_parameters(&self, kind: ComponentKind) -> Option<&ParameterSet> {
        let name = self.active_name(kind)?;
        self.component(kind, name).map(|c| c.parameters())
    }

    /// Active parts that currently have trainable parameters.
    pub fn trainable_parts(&self) -> Vec<ComponentKind> {
        ComponentKind::ALL
            .into_iter()
            .filter(|&k| {
                self.active_name(k)
                    .and_then(|n| self.component(k, n))
                    .is_some_and(|c| !c.trainable_parameters().is_empty())
            })
            .collect()
    }

    // ---- validation --------------------------------------------------------

    /// Symbolic dry run over declared dimensions. Without an input spec only
    /// the checks that need no input shape run.
    fn check(
        &self,
        encoder: Option<&dyn Encoder>,
        adapter: Option<&LoraAdapter>,
        decoder: Option<&dyn Decoder>,
        spec: Option<InputSpec>,
    ) -> Result<()> {
        if let Some(ad) = adapter {
            ad.check_host(&self.backbone)?;
        }
        let e = self.backbone.backbone_config().embed_dim;
        let Some(spec) = spec else {
            if let Some(d) = decoder {
                if d.input_dim() % e != 0 {
                    return shape_err(format!(
                        "decoder input_dim {} is not a multiple of backbone embed_dim E={e}",
                        d.input_dim()
                    ));
                }
            }
            return Ok(());
        };
        let spec = match encoder {
            Some(enc) => enc.output_spec(spec)?,
            None => spec,
        };
        self.backbone.output_spec(spec)?;
        if let Some(d) = decoder {
            let f = spec.channels * e;
            if d.input_dim() != f {
                return shape_err(format!(
                    "decoder input_dim {} does not match backbone output C·E = {}·{e} = {f}",
                    d.input_dim(),
                    spec.channels
                ));
            }
        }
        Ok(())
    }

    /// Validates the active chain without data.
    pub fn validate(&self) -> Result<()> {
        self.check(self.encoder(), self.adapter(), self.decoder(), self.input_spec)
    }

    fn check_batch(&self, batch: &TimeSeriesBatch, seen: &mut Option<InputSpec>) -> Result<()> {
        let spec = InputSpec {
            channels: batch.channels(),
            length: batch.length(),
        };
        if *seen != Some(spec) {
            self.check(self.encoder(), self.adapter(), self.decoder(), Some(spec))?;
            *seen = Some(spec);
        }
        Ok(())
    }

    fn ensure_unmerged(&self) -> Result<()> {
        match self.adapter() {
            Some(ad) if ad.is_merged() => Err(Error::State(format!(
                "adapter {:?} is merged; unmerge it before switching adapters",
                ad.name()
            ))),
            _ => Ok(()),
        }
    }

    // ---- switching ---------------------------------------------------------

    fn record_swap(&self, start: Instant) -> f64 {
        let wall = start.elapsed().as_secs_f64();
        if let Some(m) = &self.metrics {
            m.push(RunMetrics {
                phase: Phase::Swap,
                wall_time_s: wall,
                peak_mem_bytes: alloc::peak_bytes() as u64,
                resident_bytes: None,
                energy_j: None,
                batch_count: 0,
                timestamp: 0.0,
                failed: false,
                depth: 0,
            });
        }
        wall
    }

    /// Activates a registered encoder; returns the swap latency in seconds.
    pub fn load_encoder(&mut self, name: &str) -> Result<f64> {
        let start = Instant::now();
        let enc = self
            .encoders
            .get(name)
            .ok_or_else(|| unknown_name(ComponentKind::Encoder, name, self.encoders.keys()))?;
        self.check(Some(enc.as_ref()), self.adapter(), self.decoder(), self.input_spec)?;
        self.active_encoder = Some(name.to_string());
        Ok(self.record_swap(start))
    }

    /// Activates a registered adapter; returns the swap latency in seconds.
    pub fn load_adapter(&mut self, name: &str) -> Result<f64> {
        let start = Instant::now();
        let ad = self
            .adapters
            .get(name)
            .ok_or_else(|| unknown_name(ComponentKind::Adapter, name, self.adapters.keys()))?;
        if self.active_adapter.as_deref() != Some(name) {
            self.ensure_unmerged()?;
        }
        ad.check_host(&self.backbone)?;
        self.active_adapter = Some(name.to_string());
        Ok(self.record_swap(start))
    }

    /// Activates a registered decoder; returns the swap latency in seconds.
    pub fn load_decoder(&mut self, name: &str) -> Result<f64> {
        let start = Instant::now();
        let dec = self
            .decoders
            .get(name)
            .ok_or_else(|| unknown_name(ComponentKind::Decoder, name, self.decoders.keys()))?;
        self.check(self.encoder(), self.adapter(), Some(dec.as_ref()), self.input_spec)?;
        self.active_decoder = Some(name.to_string());
        Ok(self.record_swap(start))
    }

    /// Empties a slot. The component stays registered.
    pub fn unload(&mut self, kind: ComponentKind) -> Result<()> {
        match kind {
            ComponentKind::Encoder => self.active_encoder = None,
            ComponentKind::Adapter => {
                self.ensure_unmerged()?;
                self.active_adapter = None
            }
            ComponentKind::Decoder => self.active_decoder = None,
            ComponentKind::Backbone => {
                return Err(Error::Config("the backbone slot cannot be emptied".into()))
            }
        }
        Ok(())
    }

    /// Folds the active adapter into the backbone weights.
    pub fn merge_adapter(&mut self) -> Result<()> {
        let name = self.active_adapter.clone().ok_or(Error::MissingComponent("adapter"))?;
        let ad = self.adapters.get_mut(&name).expect("active is registered");
        ad.merge(Arc::make_mut(&mut self.backbone))
    }

    pub fn unmerge_adapter(&mut self) -> Result<()> {
        let name = self.active_adapter.clone().ok_or(Error::MissingComponent("adapter"))?;
        let ad = self.adapters.get_mut(&name).expect("active is registered");
        ad.unmerge(Arc::make_mut(&mut self.backbone))
    }

    // ---- execution ---------------------------------------------------------

    /// Runs encoder → backbone (with the active adapter) → decoder on the
    /// graph. Returns decoder output rows and, for batch-expanding encoders,
    /// the row provenance.
    pub fn chain<'p>(
        &'p self,
        g: &mut Graph<'p>,
        batch: &'p TimeSeriesBatch,
        pass: &Pass<'p>,
    ) -> Result<(Var, Option<WindowIndex>)> {
        let dec = self.decoder().ok_or(Error::MissingComponent("decoder"))?;
        let (x, win) = self.upstream(g, batch, pass)?;
        Ok((dec.run(g, x, pass)?, win))
    }

    fn upstream<'p>(
        &'p self,
        g: &mut Graph<'p>,
        batch: &'p TimeSeriesBatch,
        pass: &Pass<'p>,
    ) -> Result<(Var, Option<WindowIndex>)> {
        let mut x = g.input(batch.values());
        let mut win = None;
        if let Some(enc) = self.encoder() {
            win = enc.window_index(batch.batch_size(), batch.length());
            x = enc.run(g, x, pass)?;
        }
        Ok((self.backbone.run(g, x, pass)?, win))
    }

    fn eval_pass(&self) -> Pass<'_> {
        Pass::eval().with_adapter(self.adapter())
    }

    /// Embeddings `[B', C', T, E]` for one batch, in eval mode.
    pub fn embed(&self, batch: &TimeSeriesBatch) -> Result<Tensor> {
        let mut g = Graph::inference();
        let pass = self.eval_pass();
        let (x, _) = self.upstream(&mut g, batch, &pass)?;
        Ok(g.into_value(x))
    }

    /// Raw decoder output for one batch in eval mode, before window
    /// reassembly and label decoding.
    pub fn forward(&self, batch: &TimeSeriesBatch) -> Result<Tensor> {
        self.ready_for_predict()?;
        let mut g = Graph::inference();
        let pass = self.eval_pass();
        let (y, _) = self.chain(&mut g, batch, &pass)?;
        Ok(g.into_value(y))
    }

    fn ready_for_predict(&self) -> Result<&dyn Decoder> {
        let dec = self.decoder().ok_or(Error::MissingComponent("decoder"))?;
        if !dec.is_fitted() {
            return Err(not_fitted(dec.name()));
        }
        Ok(dec)
    }

    /// Predictions for every item of `data`, in order, plus the concatenated
    /// targets when every batch carries them.
    pub fn predict(&self, data: &[TimeSeriesBatch], cfg: &TaskConfig) -> Result<(Option<Targets>, Predictions)> {
        self.ready_for_predict()?;
        match &self.metrics {
            Some(m) => m.time_batches(Phase::Predict, data.len() as u64, || self.predict_inner(data, cfg)).0,
            None => self.predict_inner(data, cfg),
        }
    }

    fn predict_inner(&self, data: &[TimeSeriesBatch], cfg: &TaskConfig) -> Result<(Option<Targets>, Predictions)> {
        let mut seen = self.input_spec;
        let mut rows = Vec::with_capacity(data.len());
        for batch in data {
            self.check_batch(batch, &mut seen)?;
            let out = match &self.metrics {
                Some(m) => {
                    let (out, rec) = crate::metrics::time_phase(Phase::PredictBatch, || self.predict_batch(batch));
                    m.push(rec.with_batches(1));
                    out?
                }
                None => self.predict_batch(batch)?,
            };
            rows.push(out);
        }
        let targets = if !data.is_empty() && data.iter().all(|b| b.targets().is_some()) {
            let ts: Vec<&Targets> = data.iter().filter_map(|b| b.targets()).collect();
            Some(Targets::concat(&ts)?)
        } else {
            None
        };
        let preds = match cfg.task {
            Task::Classification => Predictions::Labels(rows.iter().flat_map(kernels::argmax_rows).collect()),
            Task::Regression | Task::Forecasting => {
                let d = self.decoder().map_or(0, |d| d.output_dim());
                if rows.is_empty() {
                    Predictions::Values(Tensor::zeros([0, d]))
                } else {
                    Predictions::Values(Tensor::concat_rows(&rows)?)
                }
            }
        };
        Ok((targets, preds))
    }

    fn predict_batch(&self, batch: &TimeSeriesBatch) -> Result<Tensor> {
        let mut g = Graph::inference();
        let pass = self.eval_pass();
        let (y, win) = self.chain(&mut g, batch, &pass)?;
        let y = g.into_value(y);
        match win {
            Some(w) => w.reassemble_mean(&y),
            None => Ok(y),
        }
    }

    // ---- training ----------------------------------------------------------

    /// Trains the listed parts on `data`.
    ///
    /// Gradient-mode decoders train end to end with Adam; every parameter
    /// outside `parts_to_train` is left bitwise unchanged. Fitted decoders
    /// train only with `parts_to_train = ["decoder"]`: embeddings are
    /// extracted once in eval mode and `fit` is called on them.
    pub fn train<S: AsRef<str>>(
        &mut self,
        data: &[TimeSeriesBatch],
        parts_to_train: &[S],
        cfg: &TaskConfig,
    ) -> Result<TrainReport> {
        let parts = PartSet::parse(parts_to_train)?;
        cfg.validate()?;
        let dec = self.decoder().ok_or(Error::MissingComponent("decoder"))?;
        for k in parts.kinds() {
            if self.active_name(k).is_none() {
                return Err(Error::MissingComponent(k.as_str()));
            }
        }
        if data.is_empty() {
            return Err(Error::Input("no training batches".into()));
        }
        if data.iter().any(|b| b.targets().is_none()) {
            return Err(Error::Input("every training batch needs targets".into()));
        }
        let mode = dec.mode();
        if mode == DecoderMode::Fit && parts != PartSet::of(&[ComponentKind::Decoder]) {
            return Err(Error::Config(format!(
                "decoder {:?} is fitted, not trained by gradient; fitted decoders cannot backpropagate, so parts_to_train must be [\"decoder\"]",
                dec.name()
            )));
        }
        if parts.contains(ComponentKind::Backbone) && self.backbone.is_frozen() {
            log::warn!("backbone is frozen; listing it in parts_to_train updates nothing");
        }
        if parts.contains(ComponentKind::Adapter) && self.adapter().is_some_and(|a| a.is_merged()) {
            return Err(Error::State("cannot train a merged adapter; unmerge it first".into()));
        }

        let collector = self.metrics.clone();
        let started = Instant::now();
        self.mode = Mode::Train;
        let mut records = Vec::new();
        let (out, rec) = crate::metrics::time_phase(Phase::Finetune, || match mode {
            DecoderMode::Fit => self.fit_decoder(data).map(|_| (Vec::new(), Vec::new())),
            DecoderMode::Gradient => self.train_gradient(data, parts, cfg, &mut records),
        });
        self.mode = Mode::Eval;
        records.push(rec.with_batches((data.len() * if mode == DecoderMode::Fit { 1 } else { cfg.epochs }) as u64));
        if let Some(c) = &collector {
            for r in &records {
                c.push(r.clone());
            }
        }
        let (epoch_losses, updated) = out?;
        Ok(TrainReport {
            mode,
            epoch_losses,
            elapsed_s: started.elapsed().as_secs_f64(),
            updated,
            metrics: records,
        })
    }

    fn fit_decoder(&mut self, data: &[TimeSeriesBatch]) -> Result<()> {
        let mut seen = self.input_spec;
        let mut rows = Vec::with_capacity(data.len());
        let mut targets = Vec::with_capacity(data.len());
        {
            let dec = self.decoder().ok_or(Error::MissingComponent("decoder"))?;
            let pass = self.eval_pass();
            for batch in data {
                self.check_batch(batch, &mut seen)?;
                let mut g = Graph::inference();
                let (x, win) = self.upstream(&mut g, batch, &pass)?;
                let x = preprocess_graph(&mut g, x, dec.input_dim())?;
                rows.push(g.into_value(x));
                let t = batch.targets().expect("checked by train");
                targets.push(match win {
                    Some(w) => t.gather(&w.items_of_rows())?,
                    None => t.clone(),
                });
            }
        }
        let x = Tensor::concat_rows(&rows)?;
        let refs: Vec<&Targets> = targets.iter().collect();
        let y = Targets::concat(&refs)?;
        let name = self.active_decoder.clone().expect("decoder is active");
        self.decoders.get_mut(&name).expect("registered").fit(&x, &y)
    }

    fn train_gradient(
        &mut self,
        data: &[TimeSeriesBatch],
        parts: PartSet,
        cfg: &TaskConfig,
        records: &mut Vec<RunMetrics>,
    ) -> Result<(Vec<f64>, Vec<String>)> {
        let adam_cfg = AdamConfig::with_lr(cfg.lr);
        let mut adam = AdamState::new();
        let mut updated: IndexMap<String, ()> = IndexMap::new();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let mut seen = self.input_spec;
        let mut step = 0u64;
        for _ in 0..cfg.epochs {
            let (loss, rec) = crate::metrics::time_phase(Phase::FinetuneEpoch, || -> Result<f64> {
                let mut total = 0.0;
                let mut items = 0usize;
                for batch in data {
                    self.check_batch(batch, &mut seen)?;
                    let (loss, grads) = self.loss_and_grads(batch, parts, cfg, step)?;
                    step += 1;
                    total += loss * batch.batch_size() as f64;
                    items += batch.batch_size();
                    adam.begin_step();
                    for (key, grad) in grads {
                        self.apply_update(&key, grad, &mut adam, &adam_cfg)?;
                        if !updated.contains_key(&key) {
                            updated.insert(key, ());
                        }
                    }
                }
                Ok(total / items as f64)
            });
            records.push(rec.with_batches(data.len() as u64));
            epoch_losses.push(loss?);
        }
        Ok((epoch_losses, updated.into_keys().collect()))
    }

    fn loss_and_grads(
        &self,
        batch: &TimeSeriesBatch,
        parts: PartSet,
        cfg: &TaskConfig,
        step: u64,
    ) -> Result<(f64, IndexMap<String, Tensor>)> {
        let mut g = Graph::new();
        let pass = Pass {
            train: true,
            grads_for: parts,
            adapter: self.adapter(),
            seed: cfg.seed,
            step,
        };
        let (y, win) = self.chain(&mut g, batch, &pass)?;
        let t = batch.targets().expect("checked by train");
        let t = match &win {
            Some(w) => t.gather(&w.items_of_rows())?,
            None => t.clone(),
        };
        let loss = task_loss(&mut g, y, t, cfg.loss_kind())?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("training loss became {value} at step {step}")));
        }
        Ok((value, g.backward(loss)?.into_map()))
    }

    fn apply_update(&mut self, key: &str, grad: Tensor, adam: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
        let (kind, path) = key
            .split_once('.')
            .ok_or_else(|| Error::State(format!("malformed gradient key {key:?}")))?;
        let params = match ComponentKind::from_str(kind)? {
            ComponentKind::Encoder => {
                let n = self.active_encoder.as_ref().ok_or(Error::MissingComponent("encoder"))?;
                self.encoders.get_mut(n).expect("registered").parameters_mut()
            }
            ComponentKind::Adapter => {
                let n = self.active_adapter.as_ref().ok_or(Error::MissingComponent("adapter"))?;
                self.adapters.get_mut(n).expect("registered").parameters_mut()
            }
            ComponentKind::Decoder => {
                let n = self.active_decoder.as_ref().ok_or(Error::MissingComponent("decoder"))?;
                self.decoders.get_mut(n).expect("registered").parameters_mut()
            }
            ComponentKind::Backbone => Arc::make_mut(&mut self.backbone).parameters_mut(),
        };
        let p = params
            .get_mut(path)
            .ok_or_else(|| Error::State(format!("gradient for unknown parameter {key:?}")))?;
        p.grad = grad;
        adam.update(key, p, cfg);
        Ok(())
    }

    // ---- persistence -------------------------------------------------------

    /// Writes the registered component called `name` to `path`. The backbone
    /// is addressed by its own name.
    pub fn save_component(&self, name: &str, path: &Path) -> Result<()> {
        let hits: Vec<&dyn Component> = ComponentKind::ALL
            .into_iter()
            .filter_map(|k| self.component(k, name))
            .collect();
        match hits.as_slice() {
            [] => Err(Error::Registry(format!("no component named {name:?}"))),
            [c] => persist::save_component(*c, path, Precision::F64),
            _ => Err(Error::Registry(format!(
                "name {name:?} is registered under several kinds; use save_component_of"
            ))),
        }
    }

    pub fn save_component_of(&self, kind: ComponentKind, name: &str, path: &Path) -> Result<()> {
        let c = self
            .component(kind, name)
            .ok_or_else(|| Error::Registry(format!("no {kind} named {name:?}")))?;
        persist::save_component(c, path, Precision::F64)
    }

    fn load_timed(&self, path: &Path, kind: ComponentKind) -> Result<LoadedComponent> {
        let (out, rec) = crate::metrics::time_phase(Phase::LoadComponent, || load_component_as(path, kind));
        if let Some(m) = &self.metrics {
            m.push(rec);
        }
        out
    }

    /// Loads an encoder checkpoint and registers it.
    pub fn load_encoder_file(&mut self, path: &Path, load: bool) -> Result<String> {
        match self.load_timed(path, ComponentKind::Encoder)? {
            LoadedComponent::Encoder(e) => self.add_encoder_boxed(e, load),
            _ => unreachable!("kind checked by load_component_as"),
        }
    }

    pub fn load_adapter_file(&mut self, path: &Path, load: bool) -> Result<String> {
        match self.load_timed(path, ComponentKind::Adapter)? {
            LoadedComponent::Adapter(a) => self.add_adapter_instance(a, load),
            _ => unreachable!("kind checked by load_component_as"),
        }
    }

    pub fn load_decoder_file(&mut self, path: &Path, load: bool) -> Result<String> {
        match self.load_timed(path, ComponentKind::Decoder)? {
            LoadedComponent::Decoder(d) => self.add_decoder_boxed(d, load),
            _ => unreachable!("kind checked by load_component_as"),
        }
    }
}

/// Loss of decoder output `y` against per-row targets.
fn task_loss(g: &mut Graph<'_>, y: Var, targets: Targets, kind: LossKind) -> Result<Var> {
    match (kind, targets) {
        (LossKind::Mse, Targets::Real(t)) => {
            let shape = g.shape(y).to_vec();
            let t = if t.shape() == shape.as_slice() {
                t
            } else if t.len() == shape.iter().product::<usize>() {
                t.reshape(shape)?
            } else {
                return shape_err(format!(
                    "targets {:?} do not match decoder output {shape:?}",
                    t.shape()
                ));
            };
            g.mse(y, t)
        }
        (LossKind::CrossEntropy, Targets::Labels(l)) => g.cross_entropy(y, &l),
        (LossKind::Hinge, Targets::Labels(l)) => g.hinge(y, &l, 1.0),
        (LossKind::Mse, Targets::Labels(_)) => Err(Error::Input("mse loss needs real-valued targets".into())),
        (_, Targets::Real(_)) => Err(Error::Input("classification losses need integer labels".into())),
    }
}

//! Experiment harness: build a pipeline from a JSON config, train it on a
//! synthetic dataset, score it on the held-out split and export results.

pub mod data;
pub mod overhead;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapters::LoraConfig;
use crate::backbone::{Backbone, BackboneConfig};
use crate::batch::Targets;
use crate::decoders::{self, logistic_fit, logistic_predict, ridge_fit};
use crate::encoders::{self, InputSpec};
use crate::error::{Error, Result};
use crate::metrics::{csv_cells, export_metrics, ExportFormat, MetricsCollector, Phase, RunMetrics};
use crate::numerics::mae;
use crate::pipeline::persist::canonical_json;
use crate::pipeline::{Pipeline, Predictions, Task, TaskConfig};

pub use data::{generate_dataset, last_value_forecast, mean_abs_amplitude, Dataset, DatasetSpec, Generator, Split};
pub use overhead::{compare_overhead, OverheadConfig, OverheadReport, PhaseComparison};

/// A registered component type and its configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub kind: String,
    #[serde(default)]
    pub config: Value,
}

fn default_parts() -> Vec<String> {
    vec!["decoder".into()]
}

fn default_true() -> bool {
    true
}

/// One experiment, fully determined together with `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub encoder: Option<ComponentSpec>,
    #[serde(default)]
    pub adapter: Option<LoraConfig>,
    pub decoder: ComponentSpec,
    /// `seed` here is ignored; the experiment seed is used.
    pub task: TaskConfig,
    #[serde(default = "default_parts")]
    pub parts_to_train: Vec<String>,
    pub dataset: DatasetSpec,
    #[serde(default = "default_true")]
    pub metrics: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// The config as canonical JSON with sorted keys. `output_dir` is left
    /// out so results do not depend on where they are written.
    pub fn echo(&self) -> String {
        let mut v = serde_json::to_value(self).expect("plain struct");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        canonical_json(&v)
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            seed: self.seed,
            ..self.task
        }
    }

    /// Builds the configured pipeline. Errors name the config field.
    pub fn build_pipeline(&self) -> Result<Pipeline> {
        let backbone = Backbone::new(self.backbone.clone()).map_err(|e| e.context("backbone"))?;
        let mut p = Pipeline::new(backbone);
        p.set_input_spec(InputSpec {
            channels: self.dataset.channels,
            length: self.dataset.length,
        })
        .map_err(|e| e.context("dataset"))?;
        if let Some(spec) = &self.encoder {
            let enc = encoders::build(&spec.kind, &spec.config).map_err(|e| e.context("encoder"))?;
            p.add_encoder_boxed(enc, true).map_err(|e| e.context("encoder"))?;
        }
        if let Some(cfg) = &self.adapter {
            p.add_adapter(cfg.clone()).map_err(|e| e.context("adapter"))?;
        }
        let dec = decoders::build(&self.decoder.kind, &self.decoder.config).map_err(|e| e.context("decoder"))?;
        p.add_decoder_boxed(dec, true).map_err(|e| e.context("decoder"))?;
        if self.metrics {
            p.set_metrics(Some(MetricsCollector::new()));
        }
        Ok(p)
    }

    /// Dry run: every check that needs no data.
    pub fn validate(&self) -> Result<Pipeline> {
        self.dataset.validate().map_err(|e| e.context("dataset"))?;
        self.task.validate().map_err(|e| e.context("task"))?;
        crate::component::PartSet::parse(&self.parts_to_train).map_err(|e| e.context("parts_to_train"))?;
        self.build_pipeline()
    }
}

/// Outcome of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub name: String,
    pub seed: u64,
    pub task: Task,
    /// `"accuracy"` or `"mae"`.
    pub metric_name: &'static str,
    pub metric_value: f64,
    pub epoch_losses: Vec<f64>,
    pub targets: Option<Targets>,
    pub predictions: Predictions,
    pub metrics: Vec<RunMetrics>,
    pub config_echo: String,
    pub labels: ComponentLabels,
}

/// Type names of the components an experiment used, for result tables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ComponentLabels {
    pub backbone: String,
    pub encoder: String,
    pub adapter: String,
    pub decoder: String,
}

/// Fraction of equal labels.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

fn score(task: Task, targets: &Option<Targets>, preds: &Predictions) -> Result<(&'static str, f64)> {
    match (task, targets, preds) {
        (Task::Classification, Some(Targets::Labels(t)), Predictions::Labels(p)) => Ok(("accuracy", accuracy(p, t))),
        (Task::Regression | Task::Forecasting, Some(Targets::Real(t)), Predictions::Values(p)) => {
            let t = if t.shape() == p.shape() { t.clone() } else { t.clone().reshape(p.shape())? };
            Ok(("mae", mae(p, &t)?))
        }
        _ => Err(Error::Input("test targets do not fit the task".into())),
    }
}

/// Generates the dataset, builds and trains the pipeline, predicts the test
/// split and scores it.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.dataset.validate().map_err(|e| e.context("dataset"))?;
    let task = cfg.task_config();
    task.validate().map_err(|e| e.context("task"))?;
    let ds = generate_dataset(&cfg.dataset, cfg.seed).map_err(|e| e.context("dataset"))?;
    let mut p = cfg.build_pipeline()?;
    let train = ds.train.batches(task.batch_size)?;
    let test = ds.test.batches(task.batch_size)?;
    let report = p.train(&train, &cfg.parts_to_train, &task).map_err(|e| e.context("train"))?;
    let (targets, predictions) = p.predict(&test, &task).map_err(|e| e.context("predict"))?;
    let (metric_name, metric_value) = score(task.task, &targets, &predictions)?;
    let metrics = p.metrics().map(MetricsCollector::take).unwrap_or_default();
    let name_of = |kind| p.active_name(kind).and_then(|n| p.component(kind, n)).map_or("none".to_string(), |c| c.type_name().to_string());
    use crate::component::ComponentKind as K;
    Ok(ExperimentResult {
        name: cfg.name.clone(),
        seed: cfg.seed,
        task: task.task,
        metric_name,
        metric_value,
        epoch_losses: report.epoch_losses,
        targets,
        predictions,
        metrics,
        config_echo: cfg.echo(),
        labels: ComponentLabels {
            backbone: name_of(K::Backbone),
            encoder: name_of(K::Encoder),
            adapter: name_of(K::Adapter),
            decoder: name_of(K::Decoder),
        },
    })
}

impl ExperimentResult {
    /// Timing-free summary; identical across runs with the same config and seed.
    pub fn summary_json(&self) -> Value {
        let preds = match &self.predictions {
            Predictions::Labels(l) => serde_json::json!(l),
            Predictions::Values(t) => serde_json::json!({ "shape": t.shape(), "data": t.data() }),
        };
        serde_json::json!({
            "name": self.name,
            "seed": self.seed,
            "task": self.task,
            "components": self.labels,
            "metric_name": self.metric_name,
            "metric_value": self.metric_value,
            "epoch_losses": self.epoch_losses,
            "predictions": preds,
            "config": serde_json::from_str::<Value>(&self.config_echo).expect("echo is JSON"),
        })
    }

    /// Writes `results.json` and, when metrics were collected,
    /// `metrics.jsonl` and `metrics.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("results.json"))?;
        f.write_all(canonical_json(&self.summary_json()).as_bytes())?;
        f.write_all(b"\n")?;
        if !self.metrics.is_empty() {
            export_metrics(&self.metrics, ExportFormat::Jsonl, &dir.join("metrics.jsonl"))?;
            export_metrics(&self.metrics, ExportFormat::Csv, &dir.join("metrics.csv"))?;
        }
        Ok(())
    }
}

/// A list of experiments run as one table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSuite {
    pub experiments: Vec<ExperimentConfig>,
}

impl BenchSuite {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: invalid bench suite: {e}", path.display())))
    }
}

/// Phases summarized in bench tables, and the per-phase fields.
pub const BENCH_PHASES: [Phase; 2] = [Phase::Finetune, Phase::Predict];
pub const BENCH_PHASE_FIELDS: [&str; 5] = ["wall_time_s", "peak_mem_bytes", "resident_bytes", "energy_j", "batch_count"];

pub fn bench_columns() -> Vec<String> {
    let mut cols: Vec<String> = [
        "task", "backbone", "encoder", "adapter", "decoder", "metric_name", "metric_value", "seed",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for ph in BENCH_PHASES {
        for f in BENCH_PHASE_FIELDS {
            cols.push(format!("{ph}_{f}"));
        }
    }
    cols
}

/// One table row per experiment. Phase cells come from the top-level record
/// of that phase and are empty when metrics were off.
pub fn bench_row(r: &ExperimentResult) -> Vec<String> {
    let task = serde_json::to_value(r.task).expect("enum").as_str().unwrap_or_default().to_string();
    let mut row = vec![
        task,
        r.labels.backbone.clone(),
        r.labels.encoder.clone(),
        r.labels.adapter.clone(),
        r.labels.decoder.clone(),
        r.metric_name.to_string(),
        r.metric_value.to_string(),
        r.seed.to_string(),
    ];
    for ph in BENCH_PHASES {
        match r.metrics.iter().find(|m| m.phase == ph && m.depth == 0) {
            Some(m) => {
                let cells = csv_cells(m);
                // csv_cells order: phase, wall, peak, resident, energy, batches, ...
                row.extend(cells[1..6].iter().cloned());
            }
            None => row.extend(std::iter::repeat_n(String::new(), BENCH_PHASE_FIELDS.len())),
        }
    }
    row
}

/// Runs every experiment in order and writes the combined table to `csv_path`.
pub fn run_suite(suite: &BenchSuite, csv_path: &Path) -> Result<Vec<ExperimentResult>> {
    let file = std::fs::File::create(csv_path)?;
    run_suite_to(suite, file)
}

/// Like [`run_suite`], writing the table to any sink. Experiments with an
/// `output_dir` also write their own results there.
pub fn run_suite_to<W: std::io::Write>(suite: &BenchSuite, sink: W) -> Result<Vec<ExperimentResult>> {
    let mut results = Vec::with_capacity(suite.experiments.len());
    for (i, cfg) in suite.experiments.iter().enumerate() {
        let label = if cfg.name.is_empty() { format!("experiments[{i}]") } else { cfg.name.clone() };
        let r = run_experiment(cfg).map_err(|e| e.context(label.clone()))?;
        if let Some(dir) = &cfg.output_dir {
            r.write(dir).map_err(|e| e.context(label))?;
        }
        results.push(r);
    }
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(bench_columns()).map_err(crate::metrics::csv_err)?;
    for r in &results {
        w.write_record(bench_row(r)).map_err(crate::metrics::csv_err)?;
    }
    w.flush()?;
    Ok(results)
}

/// Baselines that apply the same learner to the raw flattened series.
pub mod oracle {
    use super::*;

    /// Test accuracy of logistic regression on raw series.
    pub fn raw_logistic_accuracy(ds: &Dataset, classes: usize, lr: f64, epochs: usize) -> Result<f64> {
        let (Targets::Labels(tr), Targets::Labels(te)) = (&ds.train.targets, &ds.test.targets) else {
            return Err(Error::Input("logistic baseline needs labels".into()));
        };
        let model = logistic_fit(&ds.train.flat(), tr, classes, lr, epochs)?;
        let (pred, _) = logistic_predict(&model, &ds.test.flat())?;
        Ok(accuracy(&pred, te))
    }

    /// Test MAE of ridge regression on raw series.
    pub fn raw_ridge_mae(ds: &Dataset, lambda: f64) -> Result<f64> {
        let (Targets::Real(tr), Targets::Real(te)) = (&ds.train.targets, &ds.test.targets) else {
            return Err(Error::Input("ridge baseline needs real targets".into()));
        };
        let model = ridge_fit(&ds.train.flat(), tr, lambda, true)?;
        mae(&model.predict(&ds.test.flat())?, te)
    }

    /// Test MAE of the last-value forecast.
    pub fn naive_forecast_mae(ds: &Dataset, horizon: usize) -> Result<f64> {
        let Targets::Real(te) = &ds.test.targets else {
            return Err(Error::Input("forecast baseline needs real targets".into()));
        };
        mae(&last_value_forecast(&ds.test.values, horizon), te)
    }
}

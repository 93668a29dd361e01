//! Pipeline-mediated execution against the same components chained by hand.
//!
//! Both paths run on identical data and seeds. Outputs are compared bitwise
//! before any timing is reported. Repetitions alternate which path goes
//! first and each repetition pairs one run of each path, so slow drift in
//! machine speed hits both sides of a pair alike. Predict pairs are
//! interleaved chunk by chunk for the same reason. The reported ratio is the
//! median of the per-pair ratios.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::batch::{Targets, TimeSeriesBatch};
use crate::component::{Component, ComponentKind, PartSet, Pass};
use crate::decoders::{Decoder, MlpDecoder, MlpDecoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Graph};
use crate::pipeline::{Pipeline, Predictions, Task, TaskConfig};
use crate::rng;
use crate::tensor::Tensor;

fn d_batch() -> usize {
    16
}
fn d_channels() -> usize {
    1
}
fn d_length() -> usize {
    64
}
fn d_hidden() -> usize {
    32
}
fn d_epochs() -> usize {
    5
}
fn d_train_batches() -> usize {
    16
}
fn d_predict_batches() -> usize {
    1000
}
fn d_reps() -> usize {
    3
}
fn d_finetune_reps() -> usize {
    7
}
fn d_chunk() -> usize {
    50
}

/// Defaults are the reference setup: B=16, C=1, L=64, p=16, E=32, two layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverheadConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_length")]
    pub length: usize,
    #[serde(default = "d_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_train_batches")]
    pub train_batches: usize,
    #[serde(default = "d_predict_batches")]
    pub predict_batches: usize,
    /// Predict repetitions.
    #[serde(default = "d_reps")]
    pub repetitions: usize,
    /// Finetuning is short, so it gets more repetitions.
    #[serde(default = "d_finetune_reps")]
    pub finetune_repetitions: usize,
    /// Predict batches per interleaved chunk.
    #[serde(default = "d_chunk")]
    pub predict_chunk: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for OverheadConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

/// Wall times of one phase on both paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseComparison {
    pub pipeline_mean_s: f64,
    pub manual_mean_s: f64,
    pub pipeline_min_s: f64,
    pub manual_min_s: f64,
    /// Median over repetitions of pipeline time / manual time.
    pub ratio: f64,
}

impl PhaseComparison {
    fn from_samples(pipeline: &[f64], manual: &[f64]) -> Self {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
        let mut ratios: Vec<f64> = pipeline.iter().zip(manual).map(|(p, m)| p / m).collect();
        ratios.sort_by(f64::total_cmp);
        let n = ratios.len();
        let ratio = if n % 2 == 1 { ratios[n / 2] } else { (ratios[n / 2 - 1] + ratios[n / 2]) / 2.0 };
        PhaseComparison {
            pipeline_mean_s: mean(pipeline),
            manual_mean_s: mean(manual),
            pipeline_min_s: min(pipeline),
            manual_min_s: min(manual),
            ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub finetune: PhaseComparison,
    pub predict: PhaseComparison,
    /// Always true in a returned report; a mismatch is an error instead.
    pub outputs_equal: bool,
}

fn make_batches(cfg: &OverheadConfig, n: usize, split: &str, with_targets: bool) -> Result<Vec<TimeSeriesBatch>> {
    (0..n as u64)
        .map(|i| {
            let keys = [cfg.seed, rng::label(split), i];
            let x = rng::gaussian([cfg.batch_size, cfg.channels, cfg.length], 1.0, &keys);
            if with_targets {
                let y = rng::gaussian([cfg.batch_size, 1], 1.0, &[cfg.seed, rng::label("targets"), i]);
                TimeSeriesBatch::with_targets(x, Targets::Real(y))
            } else {
                TimeSeriesBatch::new(x)
            }
        })
        .collect()
}

/// Hand-written training loop equivalent to `Pipeline::train` with
/// `parts_to_train = ["decoder"]` and an MSE task.
pub fn manual_train(backbone: &Backbone, decoder: &mut dyn Decoder, data: &[TimeSeriesBatch], task: &TaskConfig) -> Result<()> {
    let adam_cfg = AdamConfig::with_lr(task.lr);
    let mut adam = AdamState::new();
    let mut step = 0u64;
    let grads_for = PartSet::of(&[ComponentKind::Decoder]);
    for _ in 0..task.epochs {
        for batch in data {
            let grads = {
                let mut g = Graph::new();
                let pass = Pass {
                    train: true,
                    grads_for,
                    adapter: None,
                    seed: task.seed,
                    step,
                };
                let x = g.input(batch.values());
                let h = backbone.run(&mut g, x, &pass)?;
                let y = decoder.run(&mut g, h, &pass)?;
                let Some(Targets::Real(t)) = batch.targets() else {
                    return Err(Error::Input("manual training needs real targets".into()));
                };
                let loss = g.mse(y, t.clone())?;
                g.backward(loss)?.into_map()
            };
            step += 1;
            adam.begin_step();
            for (key, grad) in grads {
                let path = key.strip_prefix("decoder.").expect("only decoder gradients requested");
                let p = decoder.parameters_mut().get_mut(path).expect("decoder parameter");
                p.grad = grad;
                adam.update(&key, p, &adam_cfg);
            }
        }
    }
    Ok(())
}

/// Hand-written equivalent of `Pipeline::predict` for a regression task.
pub fn manual_predict(backbone: &Backbone, decoder: &dyn Decoder, data: &[TimeSeriesBatch]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(data.len());
    for batch in data {
        let mut g = Graph::inference();
        let pass = Pass::eval();
        let x = g.input(batch.values());
        let h = backbone.run(&mut g, x, &pass)?;
        let y = decoder.run(&mut g, h, &pass)?;
        rows.push(g.into_value(y));
    }
    Tensor::concat_rows(&rows)
}

/// Times finetune and predict through the pipeline and by hand.
pub fn compare_overhead(cfg: &OverheadConfig) -> Result<OverheadReport> {
    if cfg.repetitions == 0 || cfg.finetune_repetitions == 0 || cfg.train_batches == 0 || cfg.predict_batches == 0 || cfg.predict_chunk == 0 {
        return Err(Error::Config("repetitions, batch counts and predict_chunk must be ≥ 1".into()));
    }
    let backbone = Backbone::new(cfg.backbone.clone())?;
    let decoder = MlpDecoder::new(MlpDecoderConfig {
        input_dim: cfg.channels * cfg.backbone.embed_dim,
        output_dim: 1,
        hidden_dim: cfg.hidden_dim,
        seed: cfg.seed,
    })?;
    let mut base = Pipeline::new(backbone.clone());
    base.add_decoder(decoder.clone(), true)?;
    let task = TaskConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        ..TaskConfig::new(Task::Regression)
    };
    let train = make_batches(cfg, cfg.train_batches, "train", true)?;
    let test = make_batches(cfg, cfg.predict_batches, "predict", false)?;

    let mut ft_pipe = Vec::with_capacity(cfg.finetune_repetitions);
    let mut ft_manual = Vec::with_capacity(cfg.finetune_repetitions);
    let mut trained: Option<Pipeline> = None;
    for rep in 0..cfg.finetune_repetitions {
        let mut p = base.clone();
        let mut d = decoder.clone();
        let mut run_pipe = || -> Result<f64> {
            let t = Instant::now();
            p.train(&train, &["decoder"], &task)?;
            Ok(t.elapsed().as_secs_f64())
        };
        let (tp, tm) = if rep % 2 == 0 {
            let tp = run_pipe()?;
            let t = Instant::now();
            manual_train(&backbone, &mut d, &train, &task)?;
            (tp, t.elapsed().as_secs_f64())
        } else {
            let t = Instant::now();
            manual_train(&backbone, &mut d, &train, &task)?;
            let tm = t.elapsed().as_secs_f64();
            (run_pipe()?, tm)
        };
        let pd = p.decoder().expect("decoder active");
        if !pd.parameters().bitwise_eq(d.parameters()) {
            return Err(Error::Numerical(
                "pipeline and manual training produced different decoder parameters".into(),
            ));
        }
        ft_pipe.push(tp);
        ft_manual.push(tm);
        trained.get_or_insert(p);
    }

    let p = trained.expect("at least one repetition");
    let dec = p.decoder().expect("decoder active");
    let mut pr_pipe = Vec::with_capacity(cfg.repetitions);
    let mut pr_manual = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.repetitions {
        let (mut tp, mut tm) = (0.0, 0.0);
        let mut pipe_rows = Vec::new();
        let mut manual_rows = Vec::new();
        for (i, chunk) in test.chunks(cfg.predict_chunk).enumerate() {
            let run_pipe = || -> Result<(f64, Predictions)> {
                let t = Instant::now();
                let (_, out) = p.predict(chunk, &task)?;
                Ok((t.elapsed().as_secs_f64(), out))
            };
            let run_manual = || -> Result<(f64, Tensor)> {
                let t = Instant::now();
                let out = manual_predict(&backbone, dec, chunk)?;
                Ok((t.elapsed().as_secs_f64(), out))
            };
            let ((dp, a), (dm, b)) = if (rep + i) % 2 == 0 {
                let a = run_pipe()?;
                (a, run_manual()?)
            } else {
                let b = run_manual()?;
                (run_pipe()?, b)
            };
            tp += dp;
            tm += dm;
            pipe_rows.push(a.values().cloned().ok_or_else(|| Error::Numerical("pipeline predictions are not real-valued".into()))?);
            manual_rows.push(b);
        }
        if !Tensor::concat_rows(&pipe_rows)?.bitwise_eq(&Tensor::concat_rows(&manual_rows)?) {
            return Err(Error::Numerical("pipeline and manual predictions differ".into()));
        }
        pr_pipe.push(tp);
        pr_manual.push(tm);
    }

    Ok(OverheadReport {
        finetune: PhaseComparison::from_samples(&ft_pipe, &ft_manual),
        predict: PhaseComparison::from_samples(&pr_pipe, &pr_manual),
        outputs_equal: true,
    })
}

//! Task heads. The MLP trains by backpropagation; ridge, KNN, logistic
//! regression and the linear SVM are fitted once on extracted embeddings.
//!
//! Every decoder sees the same design matrix: token-resolved embeddings are
//! mean-pooled over tokens, then channel and embedding axes are flattened to
//! `F = C·E` features.

mod knn;
mod logistic;
mod mlp;
mod ridge;
mod svm;

pub use knn::{knn_fit, knn_predict, KnnConfig, KnnDecoder};
pub use logistic::{logistic_fit, logistic_objective, logistic_predict, LogisticConfig, LogisticDecoder};
pub use mlp::{mlp_forward, MlpDecoder, MlpDecoderConfig};
pub use ridge::{ridge_fit, RidgeConfig, RidgeDecoder};
pub use svm::{svm_fit, SvmConfig, SvmDecoder};

use serde::{Deserialize, Serialize};

use crate::batch::{EmbeddingTensor, Targets};
use crate::component::Component;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Var};
use crate::tensor::Tensor;

/// How a decoder learns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    /// Parameters updated by the optimizer through the graph.
    Gradient,
    /// Closed-form or instance-based fit on embeddings; no gradients.
    Fit,
}

pub trait Decoder: Component {
    /// Declared feature count `F`.
    fn input_dim(&self) -> usize;

    /// Output width: regression targets or class scores.
    fn output_dim(&self) -> usize;

    fn mode(&self) -> DecoderMode;

    /// Fits on a design matrix `[n, F]`. Gradient-mode decoders reject this.
    fn fit(&mut self, _x: &Tensor, _targets: &Targets) -> Result<()> {
        Err(Error::State(format!(
            "decoder {:?} trains by gradient and has no fit step",
            self.name()
        )))
    }

    fn is_fitted(&self) -> bool {
        true
    }

    fn clone_box(&self) -> Box<dyn Decoder>;
}

impl Clone for Box<dyn Decoder> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Graph form of [`decoder_preprocess`].
pub(crate) fn preprocess_graph(g: &mut Graph<'_>, x: Var, input_dim: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x = match s.len() {
        4 => g.mean_tokens(x)?,
        3 | 2 => x,
        _ => return shape_err(format!("decoder expects an embedding tensor, got {s:?}")),
    };
    let s = g.shape(x).to_vec();
    let f: usize = s[1..].iter().product();
    if f != input_dim {
        return shape_err(format!(
            "decoder input_dim {input_dim} does not match embedding features F={f} (from {s:?})"
        ));
    }
    if s.len() == 2 {
        Ok(x)
    } else {
        g.reshape(x, [s[0], f])
    }
}

/// `[B, C, T, E]` or `[B, C, E]` → `[B, C·E]`, checked against `input_dim`.
pub fn decoder_preprocess(emb: &EmbeddingTensor, input_dim: usize) -> Result<Tensor> {
    let mut g = Graph::inference();
    let x = g.input(emb.data());
    let y = preprocess_graph(&mut g, x, input_dim)?;
    Ok(g.into_value(y))
}

/// Builds a decoder from its registered type name and JSON config.
pub fn build(type_name: &str, cfg: &serde_json::Value) -> Result<Box<dyn Decoder>> {
    fn parse<T: serde::de::DeserializeOwned>(what: &str, cfg: &serde_json::Value) -> Result<T> {
        serde_json::from_value(cfg.clone()).map_err(|e| Error::Config(format!("invalid {what} decoder config: {e}")))
    }
    Ok(match type_name {
        "mlp" => Box::new(MlpDecoder::new(parse(type_name, cfg)?)?),
        "ridge" => Box::new(RidgeDecoder::new(parse(type_name, cfg)?)?),
        "knn" => Box::new(KnnDecoder::new(parse(type_name, cfg)?)?),
        "logistic" => Box::new(LogisticDecoder::new(parse(type_name, cfg)?)?),
        "svm" => Box::new(SvmDecoder::new(parse(type_name, cfg)?)?),
        other => {
            return Err(Error::Registry(format!(
                "unknown decoder type {other:?}; known: {}",
                DECODER_TYPES.join(", ")
            )))
        }
    })
}

pub const DECODER_TYPES: [&str; 5] = ["mlp", "ridge", "knn", "logistic", "svm"];

/// Per-feature mean and standard deviation; constant features get scale 1.
#[derive(Clone, Debug)]
pub(crate) struct Scaler {
    pub mean: Tensor,
    pub scale: Tensor,
}

impl Scaler {
    pub fn fit(x: &Tensor) -> Self {
        let (n, f) = (x.shape()[0], x.shape()[1]);
        let mut mean = vec![0.0; f];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; f];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Scaler {
            mean: Tensor::new([f], mean).expect("sized"),
            scale: Tensor::new([f], scale).expect("sized"),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let f = self.mean.len();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(f) {
            for ((v, m), s) in row.iter_mut().zip(self.mean.data()).zip(self.scale.data()) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

pub(crate) fn check_design(x: &Tensor, input_dim: usize) -> Result<usize> {
    if x.rank() != 2 || x.shape()[1] != input_dim {
        return shape_err(format!(
            "design matrix must be [n, {input_dim}], got {:?}",
            x.shape()
        ));
    }
    if x.shape()[0] == 0 {
        return Err(Error::Input("cannot fit on zero rows".into()));
    }
    if !x.all_finite() {
        return Err(Error::Input("design matrix contains non-finite values".into()));
    }
    Ok(x.shape()[0])
}

pub(crate) fn expect_labels(targets: &Targets, n: usize, classes: usize) -> Result<&[usize]> {
    match targets {
        Targets::Labels(l) if l.len() == n => {
            if let Some(&bad) = l.iter().find(|&&y| y >= classes) {
                return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
            }
            Ok(l)
        }
        Targets::Labels(l) => shape_err(format!("{} labels for {n} rows", l.len())),
        Targets::Real(_) => Err(Error::Input("classification decoder needs integer labels".into())),
    }
}

pub(crate) fn not_fitted(name: &str) -> Error {
    Error::State(format!("decoder {name:?} is not fitted; train it with parts_to_train=[\"decoder\"] first"))
}

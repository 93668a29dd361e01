use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{check_design, expect_labels, not_fitted, preprocess_graph, Decoder, DecoderMode, Scaler};
use crate::batch::Targets;
use crate::component::{Component, ComponentKind, Pass};
use crate::error::{Error, Result};
use crate::numerics::{argmax_rows, kernels, Graph, Var};
use crate::params::{Param, ParameterSet};
use crate::tensor::Tensor;

fn default_lr() -> f64 {
    0.5
}

fn default_epochs() -> usize {
    500
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

/// Multinomial softmax regression on z-scored features, trained by
/// full-batch gradient descent from zero weights.
#[derive(Clone, Debug)]
pub struct LogisticDecoder {
    name: String,
    cfg: LogisticConfig,
    params: ParameterSet,
}

/// Mean cross-entropy of `softmax(z·Wᵀ + b)` and its gradients with respect
/// to the `"weight"` and `"bias"` entries of `params`.
pub fn logistic_objective(params: &ParameterSet, z: &Tensor, labels: &[usize]) -> Result<(f64, IndexMap<String, Tensor>)> {
    let (Some(w), Some(b)) = (params.get("weight"), params.get("bias")) else {
        return Err(Error::Input("logistic objective needs weight and bias".into()));
    };
    let mut g = Graph::new();
    let x = g.input(z);
    let wv = g.param(|| "weight".into(), w, true);
    let bv = g.param(|| "bias".into(), b, true);
    let logits = g.linear(x, wv, Some(bv))?;
    let loss = g.cross_entropy(logits, labels)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), grads.into_map()))
}

impl LogisticDecoder {
    pub fn new(cfg: LogisticConfig) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.num_classes < 2 {
            return Err(Error::Config(format!(
                "logistic needs input_dim ≥ 1 and num_classes ≥ 2, got {cfg:?}"
            )));
        }
        if !(cfg.lr > 0.0) || cfg.epochs == 0 {
            return Err(Error::Config("logistic needs lr > 0 and epochs ≥ 1".into()));
        }
        Ok(LogisticDecoder {
            name: "logistic".into(),
            cfg,
            params: ParameterSet::new(),
        })
    }

    fn scaler(&self) -> Option<Scaler> {
        Some(Scaler {
            mean: self.params.get("scaler.mean")?.value.clone(),
            scale: self.params.get("scaler.scale")?.value.clone(),
        })
    }

    /// Class probabilities `[n, K]`.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let (Some(s), Some(w), Some(b)) = (self.scaler(), self.params.get("weight"), self.params.get("bias")) else {
            return Err(not_fitted(&self.name));
        };
        let logits = kernels::linear(&s.apply(x), &w.value, Some(&b.value))?;
        Ok(kernels::softmax(&logits))
    }
}

impl Component for LogisticDecoder {
    fn kind(&self) -> ComponentKind {
        ComponentKind::Decoder
    }
    fn type_name(&self) -> &'static str {
        "logistic"
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
    fn trainable_parameters(&self) -> Vec<String> {
        self.params.names().map(String::from).collect()
    }
    fn preprocess<'p>(&'p self, g: &mut Graph<'p>, x: Var) -> Result<Var> {
        preprocess_graph(g, x, self.cfg.input_dim)
    }
    fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var, _pass: &Pass<'p>) -> Result<Var> {
        let p = self.predict_proba(g.value(x))?;
        Ok(g.constant(p))
    }
}

impl Decoder for LogisticDecoder {
    fn input_dim(&self) -> usize {
        self.cfg.input_dim
    }
    fn output_dim(&self) -> usize {
        self.cfg.num_classes
    }
    fn mode(&self) -> DecoderMode {
        DecoderMode::Fit
    }
    fn is_fitted(&self) -> bool {
        self.params.get("weight").is_some()
    }
    fn clone_box(&self) -> Box<dyn Decoder> {
        Box::new(self.clone())
    }

    fn fit(&mut self, x: &Tensor, targets: &Targets) -> Result<()> {
        let n = check_design(x, self.cfg.input_dim)?;
        let k = self.cfg.num_classes;
        let labels = expect_labels(targets, n, k)?;
        for c in 0..k {
            if !labels.contains(&c) {
                log::warn!("logistic decoder {:?}: class {c} has no training examples", self.name);
            }
        }
        let scaler = Scaler::fit(x);
        let z = scaler.apply(x);
        let mut p = ParameterSet::new();
        p.insert("weight", Param::new(Tensor::zeros([k, self.cfg.input_dim])))?;
        p.insert("bias", Param::new(Tensor::zeros([k])))?;
        for _ in 0..self.cfg.epochs {
            let (_, grads) = logistic_objective(&p, &z, labels)?;
            for (name, param) in p.iter_mut() {
                for (v, g) in param.value.data_mut().iter_mut().zip(grads[name].data()) {
                    *v -= self.cfg.lr * g;
                }
            }
        }
        let mut fitted = ParameterSet::new();
        fitted.insert("scaler.mean", Param::frozen(scaler.mean))?;
        fitted.insert("scaler.scale", Param::frozen(scaler.scale))?;
        for (name, param) in p.iter() {
            fitted.insert(name, Param::frozen(param.value.clone()))?;
        }
        self.params = fitted;
        Ok(())
    }
}

/// Fits softmax regression with `classes` classes.
pub fn logistic_fit(x: &Tensor, labels: &[usize], classes: usize, lr: f64, epochs: usize) -> Result<LogisticDecoder> {
    let mut d = LogisticDecoder::new(LogisticConfig {
        input_dim: x.shape().get(1).copied().unwrap_or(0),
        num_classes: classes,
        lr,
        epochs,
    })?;
    d.fit(x, &Targets::Labels(labels.to_vec()))?;
    Ok(d)
}

/// Predicted labels and class probabilities.
pub fn logistic_predict(d: &LogisticDecoder, x: &Tensor) -> Result<(Vec<usize>, Tensor)> {
    let p = d.predict_proba(x)?;
    Ok((argmax_rows(&p), p))
}

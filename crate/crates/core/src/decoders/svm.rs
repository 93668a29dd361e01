use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{check_design, expect_labels, not_fitted, preprocess_graph, Decoder, DecoderMode, Scaler};
use crate::batch::Targets;
use crate::component::{Component, ComponentKind, Pass};
use crate::error::{Error, Result};
use crate::numerics::{argmax_rows, kernels, Graph, Var};
use crate::params::{Param, ParameterSet};
use crate::tensor::Tensor;

fn default_c() -> f64 {
    1.0
}

fn default_lr() -> f64 {
    1e-2
}

fn default_epochs() -> usize {
    300
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

/// One-vs-rest linear SVMs on z-scored features. Minimizes
/// `½‖W‖² + C·mean_i Σ_k max(0, 1 − y_ik·s_ik)` by full-batch subgradient
/// descent. Two classes use a single score column.
#[derive(Clone, Debug)]
pub struct SvmDecoder {
    name: String,
    cfg: SvmConfig,
    params: ParameterSet,
    trace: Vec<f64>,
}

impl SvmDecoder {
    pub fn new(cfg: SvmConfig) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.num_classes < 2 {
            return Err(Error::Config(format!(
                "svm needs input_dim ≥ 1 and num_classes ≥ 2, got {cfg:?}"
            )));
        }
        if !(cfg.lr > 0.0) || !(cfg.c > 0.0) || cfg.epochs == 0 {
            return Err(Error::Config("svm needs lr > 0, c > 0 and epochs ≥ 1".into()));
        }
        Ok(SvmDecoder {
            name: "svm".into(),
            cfg,
            params: ParameterSet::new(),
            trace: Vec::new(),
        })
    }

    fn columns(&self) -> usize {
        if self.cfg.num_classes == 2 {
            1
        } else {
            self.cfg.num_classes
        }
    }

    /// Objective value before each epoch's update, then after the last.
    pub fn objective_trace(&self) -> &[f64] {
        &self.trace
    }

    /// Raw one-vs-rest scores `[n, columns]`.
    pub fn decision_function(&self, x: &Tensor) -> Result<Tensor> {
        let get = |k: &str| self.params.get(k).map(|p| &p.value);
        let (Some(m), Some(s), Some(w), Some(b)) = (get("scaler.mean"), get("scaler.scale"), get("weight"), get("bias")) else {
            return Err(not_fitted(&self.name));
        };
        let scaler = Scaler {
            mean: m.clone(),
            scale: s.clone(),
        };
        kernels::linear(&scaler.apply(x), w, Some(b))
    }

    /// Class scores `[n, K]`; the binary score `s` becomes `[−s, s]`.
    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.decision_function(x)?;
        if self.columns() > 1 {
            return Ok(s);
        }
        let data = s.data().iter().flat_map(|&v| [-v, v]).collect();
        Tensor::new([s.shape()[0], 2], data)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.scores(x)?))
    }
}

fn objective(p: &ParameterSet, z: &Tensor, labels: &[usize], c: f64) -> Result<(f64, IndexMap<String, Tensor>)> {
    let mut g = Graph::new();
    let x = g.input(z);
    let w = g.param(|| "weight".into(), p.expect("weight"), true);
    let b = g.param(|| "bias".into(), p.expect("bias"), true);
    let s = g.linear(x, w, Some(b))?;
    let h = g.hinge(s, labels, 1.0)?;
    let h = g.scale(h, c);
    let ww = g.mul(w, w)?;
    let r = g.sum(ww);
    let r = g.scale(r, 0.5);
    let loss = g.add(h, r)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), grads.into_map()))
}

impl Component for SvmDecoder {
    fn kind(&self) -> ComponentKind {
        ComponentKind::Decoder
    }
    fn type_name(&self) -> &'static str {
        "svm"
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
        let s = self.scores(g.value(x))?;
        Ok(g.constant(s))
    }
}

impl Decoder for SvmDecoder {
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
        let labels = expect_labels(targets, n, self.cfg.num_classes)?;
        let scaler = Scaler::fit(x);
        let z = scaler.apply(x);
        let cols = self.columns();
        let mut p = ParameterSet::new();
        p.insert("weight", Param::new(Tensor::zeros([cols, self.cfg.input_dim])))?;
        p.insert("bias", Param::new(Tensor::zeros([cols])))?;
        let mut trace = Vec::with_capacity(self.cfg.epochs + 1);
        for _ in 0..self.cfg.epochs {
            let (loss, grads) = objective(&p, &z, labels, self.cfg.c)?;
            trace.push(loss);
            for (name, param) in p.iter_mut() {
                for (v, g) in param.value.data_mut().iter_mut().zip(grads[name].data()) {
                    *v -= self.cfg.lr * g;
                }
            }
        }
        trace.push(objective(&p, &z, labels, self.cfg.c)?.0);
        let mut fitted = ParameterSet::new();
        fitted.insert("scaler.mean", Param::frozen(scaler.mean))?;
        fitted.insert("scaler.scale", Param::frozen(scaler.scale))?;
        for (name, param) in p.iter() {
            fitted.insert(name, Param::frozen(param.value.clone()))?;
        }
        self.params = fitted;
        self.trace = trace;
        Ok(())
    }
}

/// Fits one-vs-rest linear SVMs.
pub fn svm_fit(x: &Tensor, labels: &[usize], classes: usize, c: f64, epochs: usize, lr: f64) -> Result<SvmDecoder> {
    let mut d = SvmDecoder::new(SvmConfig {
        input_dim: x.shape().get(1).copied().unwrap_or(0),
        num_classes: classes,
        c,
        lr,
        epochs,
    })?;
    d.fit(x, &Targets::Labels(labels.to_vec()))?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian;

    fn separable() -> (Tensor, Vec<usize>) {
        let noise = gaussian([40, 2], 0.3, &[11]);
        let mut x = Tensor::zeros([40, 2]);
        let mut labels = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let centre = if c == 0 { [-2.0, -1.0] } else { [2.0, 1.0] };
            x.data_mut()[2 * i] = centre[0] + noise.data()[2 * i];
            x.data_mut()[2 * i + 1] = centre[1] + noise.data()[2 * i + 1];
            labels.push(c);
        }
        (x, labels)
    }

    #[test]
    fn separable_two_class() {
        let (x, labels) = separable();
        let d = svm_fit(&x, &labels, 2, 1.0, 300, 1e-2).unwrap();
        assert_eq!(d.predict(&x).unwrap(), labels);
        let s = d.decision_function(&x).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            let y = if l == 1 { 1.0 } else { -1.0 };
            assert!(y * s.data()[i] >= 0.0);
        }
    }

    #[test]
    fn objective_non_increasing() {
        let (x, labels) = separable();
        let d = svm_fit(&x, &labels, 2, 1.0, 200, 1e-2).unwrap();
        for w in d.objective_trace().windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} → {}", w[0], w[1]);
        }
    }

    #[test]
    fn multiclass_uses_k_columns() {
        let x = gaussian([30, 3], 1.0, &[4]);
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let d = svm_fit(&x, &labels, 3, 1.0, 10, 1e-2).unwrap();
        assert_eq!(d.scores(&x).unwrap().shape(), &[30, 3]);
    }
}

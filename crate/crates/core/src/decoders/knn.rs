use serde::{Deserialize, Serialize};

use super::{check_design, expect_labels, not_fitted, preprocess_graph, Decoder, DecoderMode, Scaler};
use crate::batch::Targets;
use crate::component::{Component, ComponentKind, Pass};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{argmax_rows, Graph, Var};
use crate::params::{Param, ParameterSet};
use crate::tensor::Tensor;

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub k: usize,
    /// z-score features with training statistics before measuring distance.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

/// k-nearest-neighbour vote under Euclidean distance. Distance ties go to
/// the lower training index, vote ties to the lower label. Exemplars are
/// stored verbatim.
#[derive(Clone, Debug)]
pub struct KnnDecoder {
    name: String,
    cfg: KnnConfig,
    params: ParameterSet,
}

impl KnnDecoder {
    pub fn new(cfg: KnnConfig) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.num_classes == 0 || cfg.k == 0 {
            return Err(Error::Config(format!("knn needs input_dim, num_classes and k ≥ 1, got {cfg:?}")));
        }
        Ok(KnnDecoder {
            name: "knn".into(),
            cfg,
            params: ParameterSet::new(),
        })
    }

    /// Vote counts `[n, K]`.
    pub fn votes(&self, x: &Tensor) -> Result<Tensor> {
        let get = |k: &str| self.params.get(k).map(|p| &p.value);
        let (Some(ex), Some(lab)) = (get("exemplars"), get("labels")) else {
            return Err(not_fitted(&self.name));
        };
        let f = self.cfg.input_dim;
        if x.rank() != 2 || x.shape()[1] != f {
            return shape_err(format!("knn query must be [n, {f}], got {:?}", x.shape()));
        }
        let (q, ex) = match (get("scaler.mean"), get("scaler.scale")) {
            (Some(m), Some(s)) => {
                let sc = Scaler {
                    mean: m.clone(),
                    scale: s.clone(),
                };
                (sc.apply(x), sc.apply(ex))
            }
            _ => (x.clone(), ex.clone()),
        };
        let n = ex.shape()[0];
        let kk = self.cfg.num_classes;
        let mut out = vec![0.0; q.shape()[0] * kk];
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
        for (qi, row) in q.data().chunks(f).enumerate() {
            order.clear();
            for j in 0..n {
                let d: f64 = row.iter().zip(ex.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                order.push((d, j));
            }
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, j) in &order[..self.cfg.k] {
                out[qi * kk + lab.data()[j] as usize] += 1.0;
            }
        }
        Tensor::new([q.shape()[0], kk], out)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.votes(x)?))
    }
}

impl Component for KnnDecoder {
    fn kind(&self) -> ComponentKind {
        ComponentKind::Decoder
    }
    fn type_name(&self) -> &'static str {
        "knn"
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
        let v = self.votes(g.value(x))?;
        Ok(g.constant(v))
    }
}

impl Decoder for KnnDecoder {
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
        self.params.get("exemplars").is_some()
    }
    fn clone_box(&self) -> Box<dyn Decoder> {
        Box::new(self.clone())
    }

    fn fit(&mut self, x: &Tensor, targets: &Targets) -> Result<()> {
        let n = check_design(x, self.cfg.input_dim)?;
        if self.cfg.k > n {
            return Err(Error::Config(format!("knn k={} exceeds {n} training rows", self.cfg.k)));
        }
        let labels = expect_labels(targets, n, self.cfg.num_classes)?;
        let mut p = ParameterSet::new();
        if self.cfg.standardize {
            let s = Scaler::fit(x);
            p.insert("scaler.mean", Param::frozen(s.mean))?;
            p.insert("scaler.scale", Param::frozen(s.scale))?;
        }
        p.insert("exemplars", Param::frozen(x.clone()))?;
        let lab = labels.iter().map(|&l| l as f64).collect();
        p.insert("labels", Param::frozen(Tensor::new([n], lab)?))?;
        self.params = p;
        Ok(())
    }
}

/// Stores `x` and `labels` for k-NN voting.
pub fn knn_fit(x: &Tensor, labels: &[usize], k: usize, standardize: bool) -> Result<KnnDecoder> {
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let mut d = KnnDecoder::new(KnnConfig {
        input_dim: x.shape().get(1).copied().unwrap_or(0),
        num_classes: classes,
        k,
        standardize,
    })?;
    d.fit(x, &Targets::Labels(labels.to_vec()))?;
    Ok(d)
}

pub fn knn_predict(d: &KnnDecoder, x: &Tensor) -> Result<Vec<usize>> {
    d.predict(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_k1() {
        let x = Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 0.0], &[5.0, 5.0]]);
        let d = knn_fit(&x, &[0, 2, 1], 1, true).unwrap();
        assert_eq!(knn_predict(&d, &x).unwrap(), vec![0, 2, 1]);
    }

    #[test]
    fn majority_vote() {
        let x = Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 0.0], &[5.0, 5.0]]);
        let d = knn_fit(&x, &[0, 0, 1], 3, false).unwrap();
        let q = Tensor::from_rows(&[&[0.5, 0.0]]);
        assert_eq!(knn_predict(&d, &q).unwrap(), vec![0]);
    }

    #[test]
    fn ties() {
        // equidistant neighbours: the lower index wins the k=1 slot
        let x = Tensor::from_rows(&[&[-1.0], &[1.0]]);
        let d = knn_fit(&x, &[1, 0], 1, false).unwrap();
        assert_eq!(knn_predict(&d, &Tensor::from_rows(&[&[0.0]])).unwrap(), vec![1]);
        // 1-1 vote: the lower label wins
        let d = knn_fit(&x, &[1, 0], 2, false).unwrap();
        assert_eq!(knn_predict(&d, &Tensor::from_rows(&[&[0.0]])).unwrap(), vec![0]);
    }

    #[test]
    fn k_above_n_is_config_error() {
        let x = Tensor::zeros([2, 1]);
        assert!(matches!(knn_fit(&x, &[0, 1], 3, true), Err(Error::Config(_))));
    }
}

use serde::{Deserialize, Serialize};

use super::{preprocess_graph, Decoder, DecoderMode};
use crate::component::{Component, ComponentKind, Pass};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};
use crate::params::{Param, ParameterSet};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDecoderConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

/// `linear(F→H) → ReLU → linear(H→O)`. Weights start at `N(0, 1/fan_in)`,
/// biases at zero.
#[derive(Clone, Debug)]
pub struct MlpDecoder {
    name: String,
    cfg: MlpDecoderConfig,
    params: ParameterSet,
}

impl MlpDecoder {
    pub fn new(cfg: MlpDecoderConfig) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.output_dim == 0 || cfg.hidden_dim == 0 {
            return Err(Error::Config(format!("MLP dims must be ≥ 1, got {cfg:?}")));
        }
        let init = |shape: [usize; 2], path: &str| {
            rng::gaussian(shape, 1.0 / (shape[1] as f64).sqrt(), &[cfg.seed, rng::label(path)])
        };
        let mut params = ParameterSet::new();
        params.insert("fc1.weight", Param::new(init([cfg.hidden_dim, cfg.input_dim], "fc1.weight")))?;
        params.insert("fc1.bias", Param::new(Tensor::zeros([cfg.hidden_dim])))?;
        params.insert("fc2.weight", Param::new(init([cfg.output_dim, cfg.hidden_dim], "fc2.weight")))?;
        params.insert("fc2.bias", Param::new(Tensor::zeros([cfg.output_dim])))?;
        Ok(MlpDecoder {
            name: "mlp".into(),
            cfg,
            params,
        })
    }

    pub fn mlp_config(&self) -> MlpDecoderConfig {
        self.cfg
    }
}

impl Component for MlpDecoder {
    fn kind(&self) -> ComponentKind {
        ComponentKind::Decoder
    }
    fn type_name(&self) -> &'static str {
        "mlp"
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
        preprocess_graph(g, x, self.cfg.input_dim)
    }
    fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var, pass: &Pass<'p>) -> Result<Var> {
        let p = |g: &mut Graph<'p>, k: &str| pass.param(g, ComponentKind::Decoder, k, self.params.expect(k));
        let (w1, b1, w2, b2) = (p(g, "fc1.weight"), p(g, "fc1.bias"), p(g, "fc2.weight"), p(g, "fc2.bias"));
        let h = g.linear(x, w1, Some(b1))?;
        let h = g.relu(h);
        g.linear(h, w2, Some(b2))
    }
}

impl Decoder for MlpDecoder {
    fn input_dim(&self) -> usize {
        self.cfg.input_dim
    }
    fn output_dim(&self) -> usize {
        self.cfg.output_dim
    }
    fn mode(&self) -> DecoderMode {
        DecoderMode::Gradient
    }
    fn clone_box(&self) -> Box<dyn Decoder> {
        Box::new(self.clone())
    }
}

/// Runs the MLP on a design matrix `[B, F]`.
pub fn mlp_forward(mlp: &MlpDecoder, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let xv = g.input(x);
    let y = mlp.run(&mut g, xv, &Pass::eval())?;
    Ok(g.into_value(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(i: usize, h: usize, o: usize) -> MlpDecoderConfig {
        MlpDecoderConfig {
            input_dim: i,
            output_dim: o,
            hidden_dim: h,
            seed: 0,
        }
    }

    #[test]
    fn zero_weights_give_zero() {
        let mut m = MlpDecoder::new(cfg(3, 4, 2)).unwrap();
        for (_, p) in m.parameters_mut().iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let y = mlp_forward(&m, &Tensor::full([2, 3], 1.5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_forward() {
        let mut m = MlpDecoder::new(cfg(1, 1, 1)).unwrap();
        let ps = m.parameters_mut();
        ps.assign("fc1.weight", Tensor::full([1, 1], 2.0)).unwrap();
        ps.assign("fc2.weight", Tensor::full([1, 1], 3.0)).unwrap();
        ps.assign("fc2.bias", Tensor::full([1], 1.0)).unwrap();
        let y = mlp_forward(&m, &Tensor::full([1, 1], 2.0)).unwrap();
        assert_eq!(y.item(), 13.0);
    }
}

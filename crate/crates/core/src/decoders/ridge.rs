use serde::{Deserialize, Serialize};

use super::{check_design, not_fitted, preprocess_graph, Decoder, DecoderMode};
use crate::batch::Targets;
use crate::component::{Component, ComponentKind, Pass};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{kernels, Graph, Var};
use crate::params::{Param, ParameterSet};
use crate::tensor::Tensor;

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeConfig {
    pub input_dim: usize,
    #[serde(default = "default_one")]
    pub output_dim: usize,
    pub lambda: f64,
    #[serde(default = "default_true")]
    pub fit_intercept: bool,
}

/// L2-regularized least squares solved exactly by Cholesky factorization.
/// Inputs are used raw; the intercept comes from centering.
#[derive(Clone, Debug)]
pub struct RidgeDecoder {
    name: String,
    cfg: RidgeConfig,
    params: ParameterSet,
}

impl RidgeDecoder {
    pub fn new(cfg: RidgeConfig) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.output_dim == 0 {
            return Err(Error::Config("ridge dims must be ≥ 1".into()));
        }
        if !(cfg.lambda >= 0.0) || !cfg.lambda.is_finite() {
            return Err(Error::Config(format!("ridge lambda must be ≥ 0, got {}", cfg.lambda)));
        }
        Ok(RidgeDecoder {
            name: "ridge".into(),
            cfg,
            params: ParameterSet::new(),
        })
    }

    /// `[D, F]` weights after fitting.
    pub fn weights(&self) -> Option<&Tensor> {
        self.params.get("weight").map(|p| &p.value)
    }

    pub fn intercept(&self) -> Option<&Tensor> {
        self.params.get("intercept").map(|p| &p.value)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let (Some(w), Some(b)) = (self.weights(), self.intercept()) else {
            return Err(not_fitted(&self.name));
        };
        kernels::linear(x, w, Some(b))
    }
}

/// Solves `A·X = B` for symmetric positive definite `A: [f, f]`,
/// `B: [f, d]` (row-major). Returns `None` when `A` is numerically singular.
fn cholesky_solve(a: &[f64], b: &[f64], f: usize, d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; f * f];
    let scale = (0..f).map(|i| a[i * f + i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for j in 0..f {
        let mut s = a[j * f + j];
        for k in 0..j {
            s -= l[j * f + k] * l[j * f + k];
        }
        if s <= 1e-12 * scale {
            return None;
        }
        let djj = s.sqrt();
        l[j * f + j] = djj;
        for i in j + 1..f {
            let mut s = a[i * f + j];
            for k in 0..j {
                s -= l[i * f + k] * l[j * f + k];
            }
            l[i * f + j] = s / djj;
        }
    }
    let mut x = b.to_vec();
    for c in 0..d {
        for i in 0..f {
            let mut s = x[i * d + c];
            for k in 0..i {
                s -= l[i * f + k] * x[k * d + c];
            }
            x[i * d + c] = s / l[i * f + i];
        }
        for i in (0..f).rev() {
            let mut s = x[i * d + c];
            for k in i + 1..f {
                s -= l[k * f + i] * x[k * d + c];
            }
            x[i * d + c] = s / l[i * f + i];
        }
    }
    Some(x)
}

impl Component for RidgeDecoder {
    fn kind(&self) -> ComponentKind {
        ComponentKind::Decoder
    }
    fn type_name(&self) -> &'static str {
        "ridge"
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
        let y = self.predict(g.value(x))?;
        Ok(g.constant(y))
    }
}

impl Decoder for RidgeDecoder {
    fn input_dim(&self) -> usize {
        self.cfg.input_dim
    }
    fn output_dim(&self) -> usize {
        self.cfg.output_dim
    }
    fn mode(&self) -> DecoderMode {
        DecoderMode::Fit
    }
    fn is_fitted(&self) -> bool {
        self.weights().is_some()
    }
    fn clone_box(&self) -> Box<dyn Decoder> {
        Box::new(self.clone())
    }

    /// `w = (XcᵀXc + λI)⁻¹ Xcᵀ yc` with `Xc`, `yc` centered when fitting an
    /// intercept; `intercept = ȳ − x̄ᵀw`.
    fn fit(&mut self, x: &Tensor, targets: &Targets) -> Result<()> {
        let n = check_design(x, self.cfg.input_dim)?;
        let y = match targets {
            Targets::Real(t) if t.rank() == 2 && t.shape() == [n, self.cfg.output_dim] => t.clone(),
            Targets::Real(t) if t.rank() == 1 && t.len() == n && self.cfg.output_dim == 1 => t.clone().reshape([n, 1])?,
            Targets::Real(t) => {
                return shape_err(format!(
                    "ridge targets must be [{n}, {}], got {:?}",
                    self.cfg.output_dim,
                    t.shape()
                ))
            }
            Targets::Labels(_) => return Err(Error::Input("ridge needs real-valued targets".into())),
        };
        let (f, d) = (self.cfg.input_dim, self.cfg.output_dim);
        let mean_of = |t: &Tensor, w: usize| -> Vec<f64> {
            let mut m = vec![0.0; w];
            if self.cfg.fit_intercept {
                for i in 0..n {
                    for (a, v) in m.iter_mut().zip(t.row(i)) {
                        *a += v;
                    }
                }
                m.iter_mut().for_each(|a| *a /= n as f64);
            }
            m
        };
        let (xm, ym) = (mean_of(x, f), mean_of(&y, d));
        let center = |t: &Tensor, m: &[f64]| {
            let mut c = t.clone();
            for row in c.data_mut().chunks_mut(m.len()) {
                for (v, a) in row.iter_mut().zip(m) {
                    *v -= a;
                }
            }
            c
        };
        let (xc, yc) = (center(x, &xm), center(&y, &ym));
        let xt = kernels::transpose(&xc)?;
        let mut gram = kernels::matmul(&xt, &xc)?;
        for i in 0..f {
            gram.data_mut()[i * f + i] += self.cfg.lambda;
        }
        let rhs = kernels::matmul(&xt, &yc)?;
        let sol = cholesky_solve(gram.data(), rhs.data(), f, d).ok_or_else(|| {
            Error::Numerical(format!(
                "ridge system is singular at lambda={}; use lambda > 0",
                self.cfg.lambda
            ))
        })?;
        let w = kernels::transpose(&Tensor::new([f, d], sol)?)?;
        let intercept: Vec<f64> = (0..d)
            .map(|c| ym[c] - (0..f).map(|j| xm[j] * w.data()[c * f + j]).sum::<f64>())
            .collect();
        self.params.upsert("weight", Param::frozen(w));
        self.params.upsert("intercept", Param::frozen(Tensor::new([d], intercept)?));
        Ok(())
    }
}

/// Fits ridge regression on `x: [n, F]`, `y: [n]` or `[n, D]`.
pub fn ridge_fit(x: &Tensor, y: &Tensor, lambda: f64, fit_intercept: bool) -> Result<RidgeDecoder> {
    if x.rank() != 2 {
        return shape_err(format!("ridge design must be [n, F], got {:?}", x.shape()));
    }
    let output_dim = if y.rank() == 2 { y.shape()[1] } else { 1 };
    let mut r = RidgeDecoder::new(RidgeConfig {
        input_dim: x.shape()[1],
        output_dim,
        lambda,
        fit_intercept,
    })?;
    r.fit(x, &Targets::Real(y.clone()))?;
    Ok(r)
}

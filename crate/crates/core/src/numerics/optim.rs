use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Param, ParameterSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// First/second moment buffers keyed by parameter path, plus the step count.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    t: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Advances the shared step counter; call once per optimizer step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one bias-corrected update to `param` from its gradient slot.
    /// Frozen parameters are left untouched.
    pub fn update(&mut self, key: &str, param: &mut Param, cfg: &AdamConfig) {
        if param.frozen {
            return;
        }
        assert!(self.t >= 1, "begin_step must precede update");
        let n = param.value.len();
        let (m, v) = self
            .moments
            .entry(key.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let theta = param.value.data_mut();
        for (i, &g) in param.grad.data().iter().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            theta[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// One Adam step over every non-frozen entry of `params`.
pub fn adam_step(params: &mut ParameterSet, state: &mut AdamState, cfg: &AdamConfig) {
    state.begin_step();
    for (k, p) in params.iter_mut() {
        state.update(k, p, cfg);
    }
}

/// Largest `|g_analytic − g_fd| / max(1, |g_fd|)` over every non-frozen
/// scalar of `params`, using central differences with step `h`.
///
/// `f` returns the objective and its analytic gradients keyed by path.
pub fn finite_diff_check<F>(params: &ParameterSet, h: f64, f: F) -> Result<f64>
where
    F: Fn(&ParameterSet) -> Result<(f64, IndexMap<String, Tensor>)>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("step h must be > 0, got {h}")));
    }
    let (base, analytic) = f(params)?;
    if !base.is_finite() {
        return Err(Error::Numerical(format!("objective is {base}")));
    }
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for name in params.trainable_names() {
        let n = params.expect(&name).value.len();
        let zero = Tensor::zeros(params.expect(&name).value.shape());
        let g_an = analytic.get(&name).unwrap_or(&zero);
        for i in 0..n {
            let orig = params.expect(&name).value.data()[i];
            probe.get_mut(&name).unwrap().value.data_mut()[i] = orig + h;
            let fp = f(&probe)?.0;
            probe.get_mut(&name).unwrap().value.data_mut()[i] = orig - h;
            let fm = f(&probe)?.0;
            probe.get_mut(&name).unwrap().value.data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numerical(format!(
                    "objective not finite near {name}[{i}]"
                )));
            }
            let fd = (fp - fm) / (2.0 * h);
            let err = (g_an.data()[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

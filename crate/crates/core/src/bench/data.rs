//! Seeded synthetic datasets standing in for real benchmarks.
//!
//! * `sine_class`: class `k` is a sine with `k + 1` cycles over the series,
//!   random phase per item and channel, plus gaussian noise. Labels cycle
//!   `0, 1, .., K-1`, so classes are balanced within one item.
//! * `amplitude_reg`: `a·(1 + 0.5·sin(2π f t / L + φ))` with `a ~ U(0.5, 2)`
//!   and `f ∈ {1, 2, 3}`, plus noise. The target is the mean absolute value
//!   of the clean series.
//! * `ar_forecast`: an AR(2) process with unit-variance innovations and
//!   optional observation noise. The target is the next `H` values.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::{Targets, TimeSeriesBatch};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    SineClass,
    AmplitudeReg,
    ArForecast,
}

impl Generator {
    pub fn as_str(self) -> &'static str {
        match self {
            Generator::SineClass => "sine_class",
            Generator::AmplitudeReg => "amplitude_reg",
            Generator::ArForecast => "ar_forecast",
        }
    }
}

fn one() -> usize {
    1
}
fn three() -> usize {
    3
}
fn eight() -> usize {
    8
}
fn ar_default() -> [f64; 2] {
    [0.6, -0.2]
}
fn burn_in_default() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub generator: Generator,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub length: usize,
    #[serde(default)]
    pub noise_std: f64,
    /// `sine_class` only.
    #[serde(default = "three")]
    pub classes: usize,
    /// `ar_forecast` only.
    #[serde(default = "ar_default")]
    pub ar_coefs: [f64; 2],
    /// `ar_forecast` only.
    #[serde(default = "eight")]
    pub horizon: usize,
    /// `ar_forecast` only: steps discarded before the observed window.
    #[serde(default = "burn_in_default")]
    pub burn_in: usize,
}

impl DatasetSpec {
    pub fn new(generator: Generator, n_train: usize, n_test: usize, length: usize) -> Self {
        DatasetSpec {
            generator,
            n_train,
            n_test,
            channels: 1,
            length,
            noise_std: 0.0,
            classes: 3,
            ar_coefs: ar_default(),
            horizon: 8,
            burn_in: burn_in_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be ≥ 1".into()));
        }
        if self.channels == 0 || self.length == 0 {
            return Err(Error::Config("channels and length must be ≥ 1".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std must be ≥ 0, got {}", self.noise_std)));
        }
        match self.generator {
            Generator::SineClass if self.classes < 2 => Err(Error::Config("sine_class needs classes ≥ 2".into())),
            Generator::ArForecast if self.horizon == 0 => Err(Error::Config("ar_forecast needs horizon ≥ 1".into())),
            _ => Ok(()),
        }
    }
}

/// One split: values `[n, C, L]` and per-item targets.
#[derive(Clone, Debug)]
pub struct Split {
    pub values: Tensor,
    pub targets: Targets,
}

impl Split {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Consecutive batches of at most `size` items, in order.
    pub fn batches(&self, size: usize) -> Result<Vec<TimeSeriesBatch>> {
        TimeSeriesBatch::with_targets(self.values.clone(), self.targets.clone())?.chunks(size)
    }

    /// Values flattened to `[n, C·L]`, for raw-series baselines.
    pub fn flat(&self) -> Tensor {
        let n = self.len();
        let f = self.values.len() / n;
        self.values.clone().reshape([n, f]).expect("same element count")
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
}

/// Mean absolute value of a series.
pub fn mean_abs_amplitude(series: &[f64]) -> f64 {
    series.iter().map(|v| v.abs()).sum::<f64>() / series.len() as f64
}

/// Builds train and test splits. Each split draws from its own stream keyed
/// by `(seed, generator, split)`, so changing `n_test` leaves the training
/// split untouched.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let make = |split: &str, n: usize| {
        let mut r = rng::stream(&[seed, rng::label(spec.generator.as_str()), rng::label(split)]);
        match spec.generator {
            Generator::SineClass => sine_class(spec, n, &mut r),
            Generator::AmplitudeReg => amplitude_reg(spec, n, &mut r),
            Generator::ArForecast => ar_forecast(spec, n, &mut r),
        }
    };
    Ok(Dataset {
        train: make("train", spec.n_train)?,
        test: make("test", spec.n_test)?,
    })
}

fn noise_dist(std: f64) -> Option<Normal<f64>> {
    (std > 0.0).then(|| Normal::new(0.0, std).expect("finite std"))
}

fn sine_class(spec: &DatasetSpec, n: usize, r: &mut impl Rng) -> Result<Split> {
    let (c, l) = (spec.channels, spec.length);
    let noise = noise_dist(spec.noise_std);
    let mut values = Vec::with_capacity(n * c * l);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % spec.classes;
        labels.push(k);
        let cycles = (k + 1) as f64;
        for _ in 0..c {
            let phase = r.random::<f64>() * 2.0 * PI;
            for t in 0..l {
                let clean = (2.0 * PI * cycles * t as f64 / l as f64 + phase).sin();
                values.push(clean + noise.map_or(0.0, |d| d.sample(r)));
            }
        }
    }
    Ok(Split {
        values: Tensor::new([n, c, l], values)?,
        targets: Targets::Labels(labels),
    })
}

fn amplitude_reg(spec: &DatasetSpec, n: usize, r: &mut impl Rng) -> Result<Split> {
    let (c, l) = (spec.channels, spec.length);
    let noise = noise_dist(spec.noise_std);
    let mut values = Vec::with_capacity(n * c * l);
    let mut targets = Vec::with_capacity(n);
    let mut clean = Vec::with_capacity(c * l);
    for _ in 0..n {
        let a = 0.5 + 1.5 * r.random::<f64>();
        clean.clear();
        for _ in 0..c {
            let f = r.random_range(1..=3) as f64;
            let phase = r.random::<f64>() * 2.0 * PI;
            for t in 0..l {
                clean.push(a * (1.0 + 0.5 * (2.0 * PI * f * t as f64 / l as f64 + phase).sin()));
            }
        }
        targets.push(mean_abs_amplitude(&clean));
        values.extend(clean.iter().map(|v| v + noise.map_or(0.0, |d| d.sample(r))));
    }
    Ok(Split {
        values: Tensor::new([n, c, l], values)?,
        targets: Targets::Real(Tensor::new([n, 1], targets)?),
    })
}

fn ar_forecast(spec: &DatasetSpec, n: usize, r: &mut impl Rng) -> Result<Split> {
    let (c, l, h) = (spec.channels, spec.length, spec.horizon);
    let [a1, a2] = spec.ar_coefs;
    let innovation = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = noise_dist(spec.noise_std);
    let mut values = Vec::with_capacity(n * c * l);
    let mut targets = Vec::with_capacity(n * c * h);
    let total = spec.burn_in + l + h;
    let mut path = vec![0.0; total];
    for _ in 0..n {
        let mut future = Vec::with_capacity(c * h);
        for _ in 0..c {
            let (mut x1, mut x2) = (0.0, 0.0);
            for p in path.iter_mut() {
                let x = a1 * x1 + a2 * x2 + innovation.sample(r);
                x2 = x1;
                x1 = x;
                *p = x + noise.map_or(0.0, |d| d.sample(r));
            }
            values.extend_from_slice(&path[spec.burn_in..spec.burn_in + l]);
            future.extend_from_slice(&path[spec.burn_in + l..]);
        }
        targets.extend(future);
    }
    Ok(Split {
        values: Tensor::new([n, c, l], values)?,
        targets: Targets::Real(Tensor::new([n, c * h], targets)?),
    })
}

/// Last observed value of every channel repeated over the horizon; the
/// naive forecast, `[n, C·H]`.
pub fn last_value_forecast(values: &Tensor, horizon: usize) -> Tensor {
    let (n, c, l) = (values.shape()[0], values.shape()[1], values.shape()[2]);
    let mut out = Vec::with_capacity(n * c * horizon);
    for row in values.data().chunks(l) {
        out.extend(std::iter::repeat_n(row[l - 1], horizon));
    }
    Tensor::new([n, c * horizon], out).expect("sized")
}

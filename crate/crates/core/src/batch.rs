//! Batch and embedding containers plus the channel-flattening conventions.
//!
//! Raw series travel as `[B, C, L]`. The backbone treats every channel of
//! every item as an independent series, so it works on the flattened view
//! `[B·C, L]` whose row index is `b·C + c`. Backbone output is restored to
//! `[B, C, T, E]`, the token-resolved embedding layout; pooling over the
//! token axis gives `[B, C, E]`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Supervision attached to a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Real-valued targets `[B, D]`.
    Real(Tensor),
    /// Class labels, one per item.
    Labels(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(t) => t.shape().first().copied().unwrap_or(0),
            Targets::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Items `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Targets> {
        Ok(match self {
            Targets::Real(t) => Targets::Real(t.slice_rows(start, end)?),
            Targets::Labels(l) => Targets::Labels(l[start..end].to_vec()),
        })
    }

    pub fn concat(parts: &[&Targets]) -> Result<Targets> {
        match parts.first() {
            None => Err(Error::Input("no targets to concatenate".into())),
            Some(Targets::Real(_)) => {
                let mut ts = Vec::with_capacity(parts.len());
                for p in parts {
                    match p {
                        Targets::Real(t) => ts.push(t.clone()),
                        Targets::Labels(_) => {
                            return Err(Error::Input("mixed target kinds".into()))
                        }
                    }
                }
                Ok(Targets::Real(Tensor::concat_rows(&ts)?))
            }
            Some(Targets::Labels(_)) => {
                let mut out = Vec::new();
                for p in parts {
                    match p {
                        Targets::Labels(l) => out.extend_from_slice(l),
                        Targets::Real(_) => {
                            return Err(Error::Input("mixed target kinds".into()))
                        }
                    }
                }
                Ok(Targets::Labels(out))
            }
        }
    }

    /// Repeats item `i` according to `origins[j] = i` for every output row `j`.
    pub fn gather(&self, origins: &[usize]) -> Result<Targets> {
        Ok(match self {
            Targets::Labels(l) => Targets::Labels(origins.iter().map(|&i| l[i]).collect()),
            Targets::Real(t) => {
                let d = t.last_dim();
                let mut data = Vec::with_capacity(origins.len() * d);
                for &i in origins {
                    data.extend_from_slice(t.row(i));
                }
                Targets::Real(Tensor::new([origins.len(), d], data)?)
            }
        })
    }
}

/// Multichannel series `[B, C, L]` with optional targets and mask.
#[derive(Clone, Debug)]
pub struct TimeSeriesBatch {
    values: Tensor,
    targets: Option<Targets>,
    mask: Option<Tensor>,
}

impl TimeSeriesBatch {
    pub fn new(values: Tensor) -> Result<Self> {
        Self::with_parts(values, None, None)
    }

    pub fn with_targets(values: Tensor, targets: Targets) -> Result<Self> {
        Self::with_parts(values, Some(targets), None)
    }

    pub fn with_parts(values: Tensor, targets: Option<Targets>, mask: Option<Tensor>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s.contains(&0) {
            return shape_err(format!("batch values must be [B, C, L] with all dims ≥ 1, got {s:?}"));
        }
        if !values.all_finite() {
            return Err(Error::Input("batch contains non-finite values".into()));
        }
        if let Some(m) = &mask {
            if m.shape() != s {
                return shape_err(format!("mask {:?} does not match values {s:?}", m.shape()));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Input("mask entries must be 0 or 1".into()));
            }
        }
        if let Some(t) = &targets {
            if t.len() != s[0] {
                return shape_err(format!(
                    "targets cover {} items but the batch has {}",
                    t.len(),
                    s[0]
                ));
            }
            if let Targets::Real(r) = t {
                if r.rank() != 2 {
                    return shape_err(format!("real targets must be [B, D], got {:?}", r.shape()));
                }
            }
        }
        Ok(TimeSeriesBatch {
            values,
            targets,
            mask,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn targets(&self) -> Option<&Targets> {
        self.targets.as_ref()
    }

    pub fn mask(&self) -> Option<&Tensor> {
        self.mask.as_ref()
    }

    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn length(&self) -> usize {
        self.values.shape()[2]
    }

    /// Items `start..end` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Result<TimeSeriesBatch> {
        let values = self.values.slice_rows(start, end)?;
        let targets = self.targets.as_ref().map(|t| t.slice(start, end)).transpose()?;
        let mask = self.mask.as_ref().map(|m| m.slice_rows(start, end)).transpose()?;
        Self::with_parts(values, targets, mask)
    }

    /// Splits into consecutive batches of at most `size` items.
    pub fn chunks(&self, size: usize) -> Result<Vec<TimeSeriesBatch>> {
        if size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        let n = self.batch_size();
        (0..n)
            .step_by(size)
            .map(|s| self.slice(s, (s + size).min(n)))
            .collect()
    }
}

/// Axis layout of an embedding tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// `[B, C, T, E]`
    TokenResolved,
    /// `[B, C, E]`
    Pooled,
}

impl Layout {
    fn name(self) -> &'static str {
        match self {
            Layout::TokenResolved => "token-resolved [B, C, T, E]",
            Layout::Pooled => "pooled [B, C, E]",
        }
    }
}

/// Backbone output with its layout tag; the tag always matches the rank.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTensor {
    data: Tensor,
    layout: Layout,
}

impl EmbeddingTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        let layout = match data.rank() {
            4 => Layout::TokenResolved,
            3 => Layout::Pooled,
            _ => {
                return shape_err(format!(
                    "embeddings must be [B, C, T, E] or [B, C, E], got {:?}",
                    data.shape()
                ))
            }
        };
        if data.shape().contains(&0) {
            return shape_err(format!("embedding dims must be ≥ 1, got {:?}", data.shape()));
        }
        if !data.all_finite() {
            return Err(Error::Input("embedding contains non-finite values".into()));
        }
        Ok(EmbeddingTensor { data, layout })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

/// `[B, C, L] → [B·C, L]`, row `b·C + c`.
pub fn flatten_channels(batch: &TimeSeriesBatch) -> Tensor {
    let (b, c, l) = (batch.batch_size(), batch.channels(), batch.length());
    batch
        .values()
        .clone()
        .reshape([b * c, l])
        .expect("element count is preserved")
}

/// `[B·C, T, E] → [B, C, T, E]`, inverse of the flattening row order.
pub fn unflatten_channels(emb: Tensor, batch: usize, channels: usize) -> Result<EmbeddingTensor> {
    let s = emb.shape().to_vec();
    if s.len() != 3 {
        return shape_err(format!("expected [B·C, T, E], got {s:?}"));
    }
    if s[0] != batch * channels {
        return shape_err(format!(
            "leading dim {} does not equal B·C = {batch}·{channels} = {}",
            s[0],
            batch * channels
        ));
    }
    EmbeddingTensor::new(emb.reshape([batch, channels, s[1], s[2]])?)
}

/// Mean over the token axis: `[B, C, T, E] → [B, C, E]`.
pub fn pool_tokens(emb: &EmbeddingTensor) -> Result<EmbeddingTensor> {
    if emb.layout != Layout::TokenResolved {
        return Err(Error::Layout {
            expected: Layout::TokenResolved.name(),
            actual: emb.layout.name(),
        });
    }
    let s = emb.shape();
    let (b, c, t, e) = (s[0], s[1], s[2], s[3]);
    let src = emb.data.data();
    let mut out = vec![0.0; b * c * e];
    for g in 0..b * c {
        let o = &mut out[g * e..(g + 1) * e];
        for tok in 0..t {
            for (ov, xv) in o.iter_mut().zip(&src[(g * t + tok) * e..][..e]) {
                *ov += xv;
            }
        }
        for ov in o.iter_mut() {
            *ov /= t as f64;
        }
    }
    EmbeddingTensor::new(Tensor::new([b, c, e], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian;
    use proptest::prelude::*;

    fn batch(shape: [usize; 3], key: u64) -> TimeSeriesBatch {
        TimeSeriesBatch::new(gaussian(shape, 1.0, &[key])).unwrap()
    }

    #[test]
    fn flatten_is_b_major() {
        let b = batch([2, 3, 8], 1);
        let f = flatten_channels(&b);
        assert_eq!(f.shape(), &[6, 8]);
        for l in 0..8 {
            assert_eq!(f.at(&[4, l]).to_bits(), b.values().at(&[1, 1, l]).to_bits());
        }
    }

    #[test]
    fn flatten_single_channel_is_same_bytes() {
        let b = batch([1, 1, 5], 2);
        assert_eq!(flatten_channels(&b).data(), b.values().data());
    }

    #[test]
    fn flatten_exhaustive_index_check() {
        let b = batch([3, 4, 5], 3);
        let f = flatten_channels(&b);
        for bi in 0..3 {
            for c in 0..4 {
                for l in 0..5 {
                    assert_eq!(f.at(&[bi * 4 + c, l]).to_bits(), b.values().at(&[bi, c, l]).to_bits());
                }
            }
        }
    }

    #[test]
    fn unflatten_shapes() {
        let e = unflatten_channels(Tensor::zeros([6, 4, 16]), 2, 3).unwrap();
        assert_eq!(e.shape(), &[2, 3, 4, 16]);
        assert_eq!(e.layout(), Layout::TokenResolved);
        assert!(matches!(
            unflatten_channels(Tensor::zeros([6, 4, 16]), 4, 2),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pool_examples() {
        let e = EmbeddingTensor::new(Tensor::new([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap()).unwrap();
        // mean over T of rows [1,3] and [5,7]
        assert_eq!(pool_tokens(&e).unwrap().data().data(), &[3.0, 5.0]);
        let e = EmbeddingTensor::new(Tensor::new([1, 2, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap()).unwrap();
        let p = pool_tokens(&e).unwrap();
        assert_eq!(p.shape(), &[1, 2, 2]);
        assert_eq!(p.data().data(), &[1.0, 3.0, 5.0, 7.0]);
        let e = EmbeddingTensor::new(Tensor::full([2, 2, 3, 4], 1.5)).unwrap();
        assert!(pool_tokens(&e).unwrap().data().data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn pool_column_means() {
        // token sequences [1,3] and [5,7] (E = 1) for two channels
        let e = EmbeddingTensor::new(Tensor::new([1, 2, 2, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap()).unwrap();
        assert_eq!(pool_tokens(&e).unwrap().data().data(), &[2.0, 6.0]);
    }

    #[test]
    fn pool_rejects_pooled() {
        let e = EmbeddingTensor::new(Tensor::zeros([1, 1, 4])).unwrap();
        assert!(matches!(pool_tokens(&e), Err(Error::Layout { .. })));
    }

    #[test]
    fn batch_invariants() {
        assert!(TimeSeriesBatch::new(Tensor::zeros([0, 1, 4])).is_err());
        assert!(TimeSeriesBatch::new(Tensor::full([1, 1, 2], f64::NAN)).is_err());
        assert!(TimeSeriesBatch::with_parts(Tensor::zeros([2, 1, 4]), None, Some(Tensor::zeros([2, 1, 3]))).is_err());
        assert!(TimeSeriesBatch::with_targets(Tensor::zeros([2, 1, 4]), Targets::Labels(vec![0])).is_err());
    }

    proptest! {
        #[test]
        fn flatten_round_trip(b in 1usize..4, c in 1usize..4, t in 1usize..4, e in 1usize..4, seed in 0u64..1000) {
            let x = gaussian([b, c, t * e], 1.0, &[seed]);
            let batch = TimeSeriesBatch::new(x.clone()).unwrap();
            let flat = flatten_channels(&batch).reshape([b * c, t, e]).unwrap();
            let back = unflatten_channels(flat, b, c).unwrap();
            prop_assert_eq!(back.data().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}

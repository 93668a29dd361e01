//! Dense row-major `f64` tensors with allocation tracking.
//!
//! Every tensor buffer reports its size to a per-thread ledger when it is
//! created and when it is dropped. The ledger keeps the live byte count, the
//! high-water mark and a running allocation counter; [`crate::metrics`] reads
//! it to report peak memory per phase.

use std::cell::Cell;
use std::fmt;

use crate::error::{shape_err, Result};

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Per-thread view of tracked tensor allocations.
pub mod alloc {
    use super::{COUNT, LIVE, PEAK};

    /// Bytes held by live tensors on this thread.
    pub fn live_bytes() -> usize {
        LIVE.with(|c| c.get())
    }

    /// High-water mark since the last [`reset_peak`].
    pub fn peak_bytes() -> usize {
        PEAK.with(|c| c.get())
    }

    /// Number of tensor buffers allocated on this thread so far.
    pub fn allocation_count() -> u64 {
        COUNT.with(|c| c.get())
    }

    /// Resets the high-water mark to the current live byte count and returns it.
    pub fn reset_peak() -> usize {
        let live = live_bytes();
        PEAK.with(|c| c.set(live));
        live
    }

    /// Raises the high-water mark to at least `bytes`.
    pub(crate) fn raise_peak(bytes: usize) {
        PEAK.with(|c| c.set(c.get().max(bytes)));
    }

    pub(super) fn track(bytes: usize) {
        COUNT.with(|c| c.set(c.get() + 1));
        let live = LIVE.with(|c| {
            let v = c.get() + bytes;
            c.set(v);
            v
        });
        PEAK.with(|c| {
            if live > c.get() {
                c.set(live)
            }
        });
    }

    pub(super) fn untrack(bytes: usize) {
        LIVE.with(|c| c.set(c.get().saturating_sub(bytes)));
    }
}

struct Buffer(Vec<f64>);

impl Buffer {
    fn new(data: Vec<f64>) -> Self {
        alloc::track(data.len() * std::mem::size_of::<f64>());
        Buffer(data)
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Buffer::new(self.0.clone())
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        alloc::untrack(self.0.len() * std::mem::size_of::<f64>());
    }
}

/// A dense tensor of `f64` values in row-major order.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Buffer,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {n} values but {} were supplied",
                data.len()
            ));
        }
        Ok(Tensor {
            shape,
            data: Buffer::new(data),
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Buffer::new(vec![value; n]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: Buffer::new(vec![value]),
        }
    }

    /// Builds a matrix from rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            shape: vec![rows.len(), cols],
            data: Buffer::new(data),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data.0[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.0.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data.0
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data.0
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of every axis except the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.len() / self.last_dim().max(1)
        }
    }

    pub fn size_bytes(&self) -> usize {
        self.len() * std::mem::size_of::<f64>()
    }

    pub fn item(&self) -> f64 {
        self.data.0[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data.0[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data.0[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of bounds for axis of size {d}");
                acc * d + i
            })
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.len() {
            return shape_err(format!(
                "cannot reshape {:?} ({} values) into {shape:?}",
                self.shape,
                self.len()
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Buffer::new(self.data.0.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.0.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.0.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .0
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// True when shapes match and every value has the same bit pattern.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .0
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Row `i` of the tensor viewed as `[rows, last_dim]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.last_dim();
        &self.data.0[i * w..(i + 1) * w]
    }

    /// Concatenates tensors along axis 0; trailing axes must agree.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return shape_err("cannot concatenate zero tensors");
        };
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() == 0 || &p.shape[1..] != tail {
                return shape_err(format!(
                    "cannot concatenate {:?} with {:?} along axis 0",
                    first.shape, p.shape
                ));
            }
            lead += p.shape[0];
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Tensor::new(shape, data)
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.rank() == 0 || start > end || end > self.shape[0] {
            return shape_err(format!(
                "row range {start}..{end} invalid for shape {:?}",
                self.shape
            ));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data.0[start * stride..end * stride].to_vec())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data.0 == other.data.0
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let d = self.data();
        if d.len() <= SHOWN {
            write!(f, "{d:?}")
        } else {
            write!(f, "{:?}..", &d[..SHOWN])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracking_counts_live_bytes() {
        let before = alloc::live_bytes();
        let t = Tensor::zeros([4, 4]);
        assert_eq!(alloc::live_bytes(), before + 128);
        let u = t.clone();
        assert_eq!(alloc::live_bytes(), before + 256);
        drop(t);
        drop(u);
        assert_eq!(alloc::live_bytes(), before);
    }

    #[test]
    fn reshape_rejects_wrong_count() {
        let t = Tensor::zeros([2, 3]);
        assert!(t.reshape([4, 2]).is_err());
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new([2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
    }
}

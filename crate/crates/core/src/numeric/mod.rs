//! Numerical reference execution: an F64 serial oracle of the MoE-FFN
//! mathematics and an F32 taskflow executor that replays compiled TDs in
//! simulator commit order, for elementwise equivalence checks.

pub mod exec;
pub mod oracle;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::TensorSlice;

pub use exec::{alloc_buffers, init_backward_inputs, init_forward_inputs, taskflow_execute, RankBuffers};
pub use oracle::{
    combine_reduce, dispatch_permute, gmm, random_weights, serial_backward, serial_forward,
    swiglu, swiglu_grad, BackwardResult, ForwardState, MoeWeights,
};

/// Scalar element stored in a [`TensorBuffer`].
pub trait Element: Copy + Default + PartialEq + std::fmt::Debug {
    const DTYPE: &'static str;
    const WIDTH: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    const WIDTH: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte f32"))
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    const WIDTH: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte f64"))
    }
}

/// Row-major dense buffer; all handler access goes through TD slices, so
/// slice containment holds by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBuffer<T> {
    pub id: usize,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Serialize, Deserialize)]
struct BufferHeader {
    id: usize,
    shape: Vec<usize>,
    dtype: String,
}

/// Flat offsets of every element of the slice, in row-major order.
fn slice_offsets(shape: &[usize], offsets: &[usize], extents: &[usize]) -> Vec<usize> {
    assert_eq!(shape.len(), offsets.len());
    assert_eq!(shape.len(), extents.len());
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let volume: usize = extents.iter().product();
    let mut out = Vec::with_capacity(volume);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..volume {
        let flat: usize = idx
            .iter()
            .zip(offsets)
            .zip(&strides)
            .map(|((i, o), s)| (i + o) * s)
            .sum();
        out.push(flat);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < extents[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

impl<T: Element> TensorBuffer<T> {
    pub fn zeros(id: usize, shape: Vec<usize>) -> TensorBuffer<T> {
        let volume = shape.iter().product();
        TensorBuffer { id, shape, data: vec![T::default(); volume] }
    }

    pub fn volume(&self) -> usize {
        self.shape.iter().product()
    }

    fn check(&self, s: &TensorSlice) {
        assert_eq!(s.tensor_id, self.id, "slice targets tensor {}, buffer is {}", s.tensor_id, self.id);
        assert_eq!(s.offsets.len(), self.shape.len());
        for d in 0..self.shape.len() {
            assert!(
                s.offsets[d] + s.extents[d] <= self.shape[d],
                "slice out of bounds on tensor {} dim {d}",
                self.id
            );
        }
    }

    pub fn read_slice(&self, s: &TensorSlice) -> Vec<T> {
        self.check(s);
        slice_offsets(&self.shape, &s.offsets, &s.extents)
            .into_iter()
            .map(|i| self.data[i])
            .collect()
    }

    pub fn write_slice(&mut self, s: &TensorSlice, values: &[T]) {
        self.check(s);
        let idx = slice_offsets(&self.shape, &s.offsets, &s.extents);
        assert_eq!(idx.len(), values.len(), "value count does not match slice volume");
        for (i, v) in idx.into_iter().zip(values) {
            self.data[i] = *v;
        }
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let header = BufferHeader {
            id: self.id,
            shape: self.shape.clone(),
            dtype: T::DTYPE.to_string(),
        };
        let json = serde_json::to_vec_pretty(&header).map_err(|e| Error::ParseError(e.to_string()))?;
        let mut raw = Vec::with_capacity(self.data.len() * T::WIDTH);
        for v in &self.data {
            v.write_le(&mut raw);
        }
        let io = |e: std::io::Error| Error::ConfigError(format!("buffer write: {e}"));
        std::fs::write(stem.with_extension("json"), json).map_err(io)?;
        std::fs::write(stem.with_extension("bin"), raw).map_err(io)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<TensorBuffer<T>> {
        let io = |e: std::io::Error| Error::ConfigError(format!("buffer read: {e}"));
        let header: BufferHeader =
            serde_json::from_slice(&std::fs::read(stem.with_extension("json")).map_err(io)?)
                .map_err(|e| Error::ParseError(e.to_string()))?;
        if header.dtype != T::DTYPE {
            return Err(Error::ParseError(format!(
                "buffer dtype {} does not match expected {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let raw = std::fs::read(stem.with_extension("bin")).map_err(io)?;
        let volume: usize = header.shape.iter().product();
        if raw.len() != volume * T::WIDTH {
            return Err(Error::ParseError(format!(
                "buffer has {} bytes, shape implies {}",
                raw.len(),
                volume * T::WIDTH
            )));
        }
        let data = raw.chunks_exact(T::WIDTH).map(T::read_le).collect();
        Ok(TensorBuffer { id: header.id, shape: header.shape, data })
    }
}

/// Max elementwise relative error |a - o| / (|o| + 1e-12).
pub fn max_rel_err(actual: &[f64], oracle: &[f64]) -> f64 {
    assert_eq!(actual.len(), oracle.len());
    actual
        .iter()
        .zip(oracle)
        .map(|(a, o)| (a - o).abs() / (o.abs() + 1e-12))
        .fold(0.0, f64::max)
}

pub fn as_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn as_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

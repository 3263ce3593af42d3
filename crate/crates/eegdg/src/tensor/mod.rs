//! Dense f64 tensors and a tape-based reverse-mode autodiff engine.

mod tape;

pub use tape::{Tape, TensorId};


use crate::error::{Error, Result};

/// Dense row-major tensor of f64 values.
///
/// `shape` may be empty, which denotes a scalar with one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` matches the shape volume.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = numel_of(&shape)?;
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = numel_of(&shape)?;
        Ok(Tensor { shape, data: vec![0.0; n] })
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = numel_of(&shape)?;
        Ok(Tensor { shape, data: vec![value; n] })
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Sole element of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::dim(format!(
                "item() needs exactly one element, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Element count implied by a shape, with overflow checking.
pub fn numel_of(shape: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &d in shape {
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::dim(format!("shape {:?} overflows usize", shape)))?;
    }
    Ok(n)
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Shape produced by broadcasting `a` against `b` (dimensions align right;
/// a dimension of 1 stretches).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::dim(format!(
                "cannot broadcast shapes {:?} and {:?}",
                a, b
            )));
        }
    }
    Ok(out)
}

/// Strides of `shape` padded left to `rank`, with zero stride on stretched
/// dimensions so broadcast reads repeat.
pub(crate) fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let own = strides_of(shape);
    let mut out = vec![0; rank];
    let offset = rank - shape.len();
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    out
}

/// Sums `grad` (laid out as `from`) down to `to`, the reverse of a broadcast.
pub(crate) fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let out_len: usize = to.iter().product::<usize>().max(1);
    let mut out = vec![0.0; out_len];
    let rank = from.len();
    let to_strides = broadcast_strides(to, rank);
    let mut idx = vec![0usize; rank];
    for (lin, &g) in grad.iter().enumerate() {
        // Decompose lin into the multi-index of `from`.
        let mut rem = lin;
        for i in (0..rank).rev() {
            idx[i] = rem % from[i];
            rem /= from[i];
        }
        let mut off = 0;
        for i in 0..rank {
            off += idx[i] * to_strides[i];
        }
        out[off] += g;
    }
    out
}

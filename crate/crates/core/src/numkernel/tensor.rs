use std::fmt;
use std::sync::Arc;

use super::accountant::{current_accountant, MemoryAccountant};
use super::tally::current_tag;
use crate::error::{Error, Result};
use crate::taxonomy::LayerTag;

/// Dense row-major f32 tensor whose buffer is charged to a [`MemoryAccountant`].
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    tag: Option<LayerTag>,
    acct: Arc<MemoryAccountant>,
}

impl Tensor {
    fn charge(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        let acct = current_accountant();
        let tag = current_tag();
        acct.record_alloc(byte_len(data.len()), tag);
        Tensor {
            shape,
            data,
            tag,
            acct,
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::charge(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::charge(shape.to_vec(), vec![value; n])
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor::charge(shape.to_vec(), data))
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::charge(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn bytes(&self) -> u64 {
        byte_len(self.data.len())
    }

    pub fn tag(&self) -> Option<LayerTag> {
        self.tag
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Rows of a 2-D tensor (or the leading dimension otherwise).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Columns of a 2-D tensor; the product of trailing dimensions otherwise.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, format!("expected a 2-D tensor, got {s:?}"))),
        }
    }

    /// Reinterprets the buffer with a new shape; no reallocation.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.clone()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

fn byte_len(n: usize) -> u64 {
    (n * std::mem::size_of::<f32>()) as u64
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor::charge(self.shape.clone(), self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        self.acct.record_free(self.bytes(), self.tag);
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tag", &self.tag)
            .finish()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::accountant::with_accountant;

    #[test]
    fn allocation_and_release_are_accounted_once() {
        let acc = MemoryAccountant::new();
        with_accountant(acc.clone(), || {
            let a = Tensor::zeros(&[10, 10]);
            let b = a.clone();
            assert_eq!(acc.current_bytes(), 800);
            drop(a);
            let b = b.reshape(&[100]).unwrap();
            assert_eq!(acc.current_bytes(), 400);
            drop(b);
        });
        assert_eq!(acc.current_bytes(), 0);
        assert_eq!(acc.peak_bytes(), 800);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::from_vec(&[0, 3], vec![]).unwrap();
        assert_eq!(t.numel(), 0);
    }
}

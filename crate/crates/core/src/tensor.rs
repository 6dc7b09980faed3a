//! Dense row-major `f64` tensors.
//!
//! Storage sits behind an `Arc` so cloning a tensor is cheap and values can be
//! shared read-only between graph nodes, parameter stores and threads.
//! Mutation goes through [`Tensor::data_mut`], which copies on write.

use std::fmt;
use std::sync::Arc;

use crate::error::{bail_shape, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            bail_shape!("shape {:?} needs {} elements, got {}", shape, n, data.len());
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![v]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new((0..n).map(&mut f).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            bail_shape!("item() on tensor of shape {:?}", self.shape);
        }
        Ok(self.data[0])
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => bail_shape!("expected rank-4 [B,C,H,W], got {:?}", self.shape),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => bail_shape!("expected rank-2, got {:?}", self.shape),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            bail_shape!("cannot reshape {:?} into {:?}", self.shape, shape);
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            bail_shape!("elementwise shape mismatch {:?} vs {:?}", self.shape, other.shape);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            bail_shape!("accumulate shape mismatch {:?} vs {:?}", self.shape, other.shape);
        }
        for (a, b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            bail_shape!("compare shape mismatch {:?} vs {:?}", self.shape, other.shape);
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn cat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            bail_shape!("cat of zero tensors");
        };
        let (b, _, h, w) = first.dims4()?;
        let mut ctot = 0;
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                bail_shape!("cat_channels mismatch {:?} vs {:?}", first.shape, p.shape);
            }
            ctot += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * ctot * hw);
        for bi in 0..b {
            for p in parts {
                let pc = p.shape[1];
                out.extend_from_slice(&p.data[bi * pc * hw..(bi + 1) * pc * hw]);
            }
        }
        Tensor::new(&[b, ctot, h, w], out)
    }

    /// Channels `start..start+len` of a rank-4 tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        if start + len > c {
            bail_shape!("channel slice {}..{} out of {}", start, start + len, c);
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            let base = (bi * c + start) * hw;
            out.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Tensor::new(&[b, len, h, w], out)
    }

    /// Rows `start..start+len` along the leading (batch) axis.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Tensor> {
        let Some(&b) = self.shape.first() else {
            bail_shape!("narrow_batch on scalar");
        };
        if start + len > b {
            bail_shape!("batch slice {}..{} out of {}", start, start + len, b);
        }
        let per = self.numel() / b.max(1);
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor::new(&shape, self.data[start * per..(start + len) * per].to_vec())
    }

    /// Concatenates along the leading (batch) axis.
    pub fn cat_batch(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            bail_shape!("cat of zero tensors");
        };
        let tail = &first.shape[1..];
        let mut b = 0;
        let mut out = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                bail_shape!("cat_batch mismatch {:?} vs {:?}", first.shape, p.shape);
            }
            b += p.shape[0];
            out.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = b;
        Tensor::new(&shape, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_ok());
    }

    #[test]
    fn add_of_negation_is_zero() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.37 - 1.0);
        let z = x.add(&x.scale(-1.0)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elementwise_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn cat_and_narrow_roundtrip() {
        let a = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 3, 2, 2], |i| 100.0 + i as f64);
        let c = Tensor::cat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 2]);
        assert_eq!(c.narrow_channels(0, 1).unwrap(), a);
        assert_eq!(c.narrow_channels(1, 3).unwrap(), b);
    }

    #[test]
    fn copy_on_write() {
        let a = Tensor::ones(&[3]);
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(b.data(), &[5.0, 1.0, 1.0]);
    }
}

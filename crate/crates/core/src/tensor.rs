use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// NCHW extent.
pub type Shape = [usize; 4];

/// Dense rank-4 `f64` array in row-major NCHW order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(
                "tensor",
                format!("{:?} needs {} elements, got {}", shape, len, data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
            grad: None,
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
            grad: None,
        }
    }

    /// A per-channel vector laid out as `(1, c, 1, 1)`.
    pub fn channel_vector(values: Vec<f64>) -> Self {
        Self {
            shape: [1, values.len(), 1, 1],
            data: values,
            grad: None,
        }
    }

    pub fn randn(shape: Shape, rng: &mut SplitMix64, std: f64) -> Self {
        Self::from_fn(shape, |_| rng.normal() * std)
    }

    pub fn rand_uniform(shape: Shape, rng: &mut SplitMix64, lo: f64, hi: f64) -> Self {
        Self::from_fn(shape, |_| rng.uniform(lo, hi))
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Installs a gradient buffer. Its length must match the data.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("set_grad", "gradient length differs from data"));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    /// The gradient as a standalone tensor.
    pub fn grad_tensor(&self) -> Option<Tensor> {
        self.grad.as_ref().map(|g| Tensor {
            shape: self.shape,
            data: g.clone(),
            grad: None,
        })
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
            grad: None,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// One channel's `h*w` plane for sample `n`.
    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length() {
        assert!(Tensor::new([1, 2, 2, 2], vec![0.0; 7]).is_err());
    }

    #[test]
    fn grad_must_match_shape() {
        let mut t = Tensor::zeros([1, 1, 2, 2]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
    }

    #[test]
    fn index_is_row_major_nchw() {
        let t = Tensor::from_fn([2, 3, 4, 5], |i| i as f64);
        assert_eq!(t.at(1, 2, 3, 4), 119.0);
        assert_eq!(t.at(0, 1, 0, 0), 20.0);
    }
}

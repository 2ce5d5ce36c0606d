//! Dense NCHW tensors and the layer primitives used by the pose network.
//!
//! Tensors are immutable values once built. Every primitive is a pure
//! function of its inputs and exists for both `f32` (inference) and `f64`
//! (training and gradient checks). Whole-tensor reductions such as `sum`
//! and `dot` accumulate in `f64`; convolutions accumulate in the element type.

mod conv;
pub mod io;
mod ops;
mod scalar;
pub mod tape;

pub use conv::{
    conv2d, depthwise_conv2d, pointwise_conv2d, transposed_conv2d, transposed_conv2d_padded,
    ConvGeometry, Padding,
};
pub use ops::{
    activation, add, batchnorm, bilinear_resize, concat, fold_batchnorm, slice_channels,
    Activation, BatchNormParams,
};
pub use scalar::{Precision, Scalar};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "shape {:?} needs {} elements, buffer has {}",
                    shape,
                    len,
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let len: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    /// Interprets the tensor as NCHW, left-padding lower ranks with ones.
    pub fn dims4(&self) -> [usize; 4] {
        let mut d = [1usize; 4];
        let off = 4 - self.shape.len();
        d[off..].copy_from_slice(&self.shape);
        d
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on unequal shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast_from(v.as_f64())).collect(),
        }
    }

    /// Element at NCHW index of a rank-4 tensor.
    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let [_, cc, hh, ww] = self.dims4();
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    /// Borrow one `h × w` plane of a rank-3 or rank-4 tensor.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let [_, cc, h, w] = self.dims4();
        let start = (n * cc + c) * h * w;
        &self.data[start..start + h * w]
    }

    /// Splits off batch item `n` as a `1 × C × H × W` tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        let [nn, c, h, w] = self.dims4();
        assert!(n < nn);
        let len = c * h * w;
        Tensor {
            shape: vec![1, c, h, w],
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Stacks `1 × C × H × W` tensors along the batch axis.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no inputs"))?;
        let [_, c, h, w] = first.dims4();
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.dims4()[1..] != [c, h, w] {
                return Err(Error::shape("stack", first.shape(), t.shape()));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::new(&[data.len() / (c * h * w), c, h, w], data)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::invalid(
            "tensor",
            format!("rank must be 1..={MAX_RANK}, got {shape:?}"),
        ));
    }
    if shape.contains(&0) {
        return Err(Error::invalid(
            "tensor",
            format!("zero extent in {shape:?}"),
        ));
    }
    Ok(())
}

pub(crate) fn expect_rank4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    if t.rank() != 4 {
        return Err(Error::invalid(
            op,
            format!("expected an N×C×H×W tensor, got {:?}", t.shape()),
        ));
    }
    Ok(t.dims4())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_of_extents_matches_buffer() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn dims4_pads_lower_ranks() {
        let t = Tensor::<f64>::zeros(&[3, 4, 5]);
        assert_eq!(t.dims4(), [1, 3, 4, 5]);
    }

    #[test]
    fn stack_and_split_batch() {
        let a = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let b = a.scale(2.0);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2, 2]);
        assert_eq!(s.batch_item(1), b);
    }
}

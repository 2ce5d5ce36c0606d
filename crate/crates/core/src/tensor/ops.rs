use serde::{Deserialize, Serialize};

use super::{expect_rank4, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Relu6,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Relu6 => v.max(T::zero()).min(T::cast_from(6.0)),
            Activation::Linear => v,
        }
    }

    /// Derivative evaluated at the pre-activation value.
    #[inline]
    pub(crate) fn slope(self, v: f64) -> f64 {
        match self {
            Activation::Relu => f64::from(v > 0.0),
            Activation::Relu6 => f64::from(v > 0.0 && v < 6.0),
            Activation::Linear => 1.0,
        }
    }
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    if kind == Activation::Linear {
        return input.clone();
    }
    input.map(|v| kind.apply(v))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}

/// Interpolation taps along one axis: for each output index, `(i0, i1, w1)`
/// with value `(1 - w1)·x[i0] + w1·x[i1]`. Uses half-pixel centres,
/// `s = (d + 0.5)·in/out - 0.5`, clamped to the input range.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn bilinear_resize<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = expect_rank4("bilinear_resize", input)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize", "output extents must be at least 1"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(input.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for b in 0..n {
        for ch in 0..c {
            let p = input.plane(b, ch);
            for &(y0, y1, wy) in &ty {
                for &(x0, x1, wx) in &tx {
                    let top = p[y0 * w + x0].as_f64() * (1.0 - wx) + p[y0 * w + x1].as_f64() * wx;
                    let bot = p[y1 * w + x0].as_f64() * (1.0 - wx) + p[y1 * w + x1].as_f64() * wx;
                    out.push(T::cast_from(top * (1.0 - wy) + bot * wy));
                }
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

/// Adjoint of [`bilinear_resize`] for gradient propagation.
pub(crate) fn bilinear_resize_backward(grad_out: &Tensor<f64>, in_h: usize, in_w: usize) -> Tensor<f64> {
    let [n, c, oh, ow] = grad_out.dims4();
    if (oh, ow) == (in_h, in_w) {
        return grad_out.clone();
    }
    let ty = bilinear_taps(in_h, oh);
    let tx = bilinear_taps(in_w, ow);
    let mut dx = vec![0.0; n * c * in_h * in_w];
    for b in 0..n {
        for ch in 0..c {
            let g = grad_out.plane(b, ch);
            let d = &mut dx[(b * c + ch) * in_h * in_w..][..in_h * in_w];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let v = g[oy * ow + ox];
                    d[y0 * in_w + x0] += v * (1.0 - wy) * (1.0 - wx);
                    d[y0 * in_w + x1] += v * (1.0 - wy) * wx;
                    d[y1 * in_w + x0] += v * wy * (1.0 - wx);
                    d[y1 * in_w + x1] += v * wy * wx;
                }
            }
        }
    }
    Tensor::new(&[n, c, in_h, in_w], dx).expect("shape")
}

/// Per-channel normalisation statistics and affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn identity(channels: usize, epsilon: f64) -> Self {
        BatchNormParams {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let lens = [self.mean.len(), self.var.len(), self.gamma.len(), self.beta.len()];
        if lens.iter().any(|&l| l != channels) {
            return Err(Error::invalid(
                "batchnorm",
                format!("parameter lengths {lens:?} do not match {channels} channels"),
            ));
        }
        if let Some(v) = self.var.iter().find(|v| v.as_f64() + self.epsilon <= 0.0) {
            return Err(Error::invalid(
                "batchnorm",
                format!("variance {v:?} + epsilon {} is not positive", self.epsilon),
            ));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` so that `y = scale·x + shift`.
    pub fn affine(&self) -> Result<Vec<(f64, f64)>> {
        self.validate(self.channels())?;
        Ok((0..self.channels())
            .map(|c| {
                let s = self.gamma[c].as_f64() / (self.var[c].as_f64() + self.epsilon).sqrt();
                (s, self.beta[c].as_f64() - s * self.mean[c].as_f64())
            })
            .collect())
    }
}

pub fn batchnorm<T: Scalar>(input: &Tensor<T>, bn: &BatchNormParams<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = expect_rank4("batchnorm", input)?;
    bn.validate(c)?;
    let aff = bn.affine()?;
    let mut out = input.data().to_vec();
    for (i, plane) in out.chunks_mut(h * w).enumerate() {
        let (s, t) = aff[i % c];
        plane
            .iter_mut()
            .for_each(|v| *v = T::cast_from(v.as_f64() * s + t));
    }
    debug_assert_eq!(out.len(), n * c * h * w);
    Tensor::new(input.shape(), out)
}

/// Merges a batchnorm that follows a convolution into the convolution's
/// kernel and bias. `out_axis` is the kernel axis indexing output channels
/// (0 for standard/depthwise/pointwise kernels, 1 for transposed ones).
pub fn fold_batchnorm<T: Scalar>(
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    bn: &BatchNormParams<T>,
    out_axis: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let dims = expect_rank4("fold_batchnorm", kernel)?;
    if out_axis > 1 {
        return Err(Error::invalid("fold_batchnorm", "output axis must be 0 or 1"));
    }
    let cout = dims[out_axis];
    bn.validate(cout)?;
    let aff = bn.affine()?;
    let inner = dims[2] * dims[3];
    let mut k = kernel.data().to_vec();
    for (i, chunk) in k.chunks_mut(inner).enumerate() {
        let oc = if out_axis == 0 { i / dims[1] } else { i % dims[1] };
        let s = aff[oc].0;
        chunk.iter_mut().for_each(|v| *v = T::cast_from(v.as_f64() * s));
    }
    let b: Vec<T> = (0..cout)
        .map(|c| {
            let b0 = bias.map_or(0.0, |b| b.data()[c].as_f64());
            T::cast_from(b0 * aff[c].0 + aff[c].1)
        })
        .collect();
    Ok((Tensor::new(kernel.shape(), k)?, Tensor::new(&[cout], b)?))
}

pub fn concat<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
    let [n, _, h, w] = expect_rank4("concat", first)?;
    let mut total = 0;
    for t in inputs {
        let [tn, tc, th, tw] = expect_rank4("concat", t)?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape("concat", first.shape(), t.shape()));
        }
        total += tc;
    }
    let mut out = Vec::with_capacity(n * total * h * w);
    for b in 0..n {
        for t in inputs {
            let c = t.dims4()[1];
            out.extend_from_slice(&t.data()[b * c * h * w..(b + 1) * c * h * w]);
        }
    }
    Tensor::new(&[n, total, h, w], out)
}

pub fn slice_channels<T: Scalar>(input: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = expect_rank4("slice_channels", input)?;
    if len == 0 || start + len > c {
        return Err(Error::invalid(
            "slice_channels",
            format!("range {start}..{} outside {c} channels", start + len),
        ));
    }
    let mut out = Vec::with_capacity(n * len * h * w);
    for b in 0..n {
        let base = (b * c + start) * h * w;
        out.extend_from_slice(&input.data()[base..base + len * h * w]);
    }
    Tensor::new(&[n, len, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activations() {
        let x = Tensor::<f64>::new(&[4], vec![-1.0, 0.0, 2.0, 7.0]).unwrap();
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 0.0, 2.0, 7.0]);
        assert_eq!(activation(&x, Activation::Relu6).data(), &[0.0, 0.0, 2.0, 6.0]);
        assert_eq!(activation(&x, Activation::Linear), x);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 5], |i| (i as f64).sin());
        assert_eq!(bilinear_resize(&x, 3, 5).unwrap(), x);
        let c = Tensor::<f64>::full(&[1, 1, 3, 4], 2.75);
        let y = bilinear_resize(&c, 7, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.75));
    }

    #[test]
    fn bilinear_two_by_two_to_three_by_three() {
        // half-pixel: s = (d + 0.5)·2/3 - 0.5 → {-1/6 → 0, 0.5, 7/6 → 1}
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 3, 3).unwrap();
        let expect = [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", y.data());
        }
    }

    #[test]
    fn batchnorm_identity_and_zero_gamma() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let bn = BatchNormParams::identity(2, 0.0);
        assert!(batchnorm(&x, &bn).unwrap().max_abs_diff(&x) < 1e-12);
        let mut bn = BatchNormParams::identity(2, 1e-3);
        bn.gamma = vec![0.0, 0.0];
        bn.beta = vec![4.0, -1.0];
        let y = batchnorm(&x, &bn).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 4.0));
        assert!(y.plane(0, 1).iter().all(|&v| v == -1.0));
    }

    #[test]
    fn batchnorm_rejects_nonpositive_variance() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let mut bn = BatchNormParams::identity(1, 0.0);
        bn.var = vec![0.0];
        assert!(batchnorm(&x, &bn).is_err());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = Tensor::<f32>::from_fn(&[2, 3, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[2, 5, 2, 2], |i| -(i as f32));
        assert_eq!(concat(&[&a]).unwrap(), a);
        let ab = concat(&[&a, &b]).unwrap();
        assert_eq!(ab.shape(), &[2, 8, 2, 2]);
        assert_eq!(slice_channels(&ab, 0, 3).unwrap(), a);
        assert_eq!(slice_channels(&ab, 3, 5).unwrap(), b);
        let bad = Tensor::<f32>::zeros(&[2, 1, 3, 2]);
        assert!(concat(&[&a, &bad]).is_err());
    }
}

use super::{expect_rank4, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero padding giving `ceil(n / stride)` outputs, split with the smaller half first.
    Same,
    /// No padding.
    Valid,
}

/// Spatial bookkeeping shared by the convolution family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        in_h: usize,
        in_w: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv", "stride must be at least 1"));
        }
        let axis = |n: usize, k: usize| -> Result<(usize, usize)> {
            match padding {
                Padding::Same => {
                    let out = n.div_ceil(stride);
                    let total = ((out - 1) * stride + k).saturating_sub(n);
                    Ok((out, total / 2))
                }
                Padding::Valid => {
                    if n < k {
                        return Err(Error::invalid(
                            "conv",
                            format!("kernel extent {k} exceeds input extent {n} with valid padding"),
                        ));
                    }
                    Ok(((n - k) / stride + 1, 0))
                }
            }
        };
        let (out_h, pad_top) = axis(in_h, k_h)?;
        let (out_w, pad_left) = axis(in_w, k_w)?;
        Ok(ConvGeometry {
            in_h,
            in_w,
            k_h,
            k_w,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    fn is_unit(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1
    }

    #[inline]
    fn in_coord(&self, out: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = (out * self.stride + k) as isize - pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// Unfolds `channels` planes into a `(channels·k_h·k_w) × (out_h·out_w)` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], channels: usize, g: &ConvGeometry) -> Vec<T> {
    let cols = g.out_h * g.out_w;
    let mut out = vec![T::zero(); channels * g.k_h * g.k_w * cols];
    for c in 0..channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let Some(iy) = g.in_coord(oy, ky, g.pad_top, g.in_h) else {
                        continue;
                    };
                    let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.in_coord(ox, kx, g.pad_left, g.in_w) {
                            dst[oy * g.out_w + ox] = src[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters columns back onto `channels` planes.
pub(crate) fn col2im<T: Scalar>(cols: &[T], channels: usize, g: &ConvGeometry, out: &mut [T]) {
    let ncols = g.out_h * g.out_w;
    for c in 0..channels {
        let plane = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let Some(iy) = g.in_coord(oy, ky, g.pad_top, g.in_h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.in_coord(ox, kx, g.pad_left, g.in_w) {
                            plane[iy * g.in_w + ix] = plane[iy * g.in_w + ix] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::shape(op, b.shape(), &[cout]));
        }
    }
    Ok(())
}

fn add_bias<T: Scalar>(out: &mut [T], bias: Option<&Tensor<T>>, batch: usize, channels: usize) {
    let Some(b) = bias else { return };
    let plane = out.len() / (batch * channels);
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let v = b.data()[i % channels];
        chunk.iter_mut().for_each(|x| *x = *x + v);
    }
}

/// Standard 2D convolution. `kernel` is `C_out × C_in × k_h × k_w`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let [n, cin, h, w] = expect_rank4("conv2d", input)?;
    let [cout, kcin, kh, kw] = expect_rank4("conv2d", kernel)?;
    if kcin != cin {
        return Err(Error::shape("conv2d", input.shape(), kernel.shape()));
    }
    check_bias("conv2d", bias, cout)?;
    let g = ConvGeometry::new(h, w, kh, kw, stride, padding)?;
    let pix = g.out_h * g.out_w;
    let krows = cin * kh * kw;
    let mut out = vec![T::zero(); n * cout * pix];
    for b in 0..n {
        let x = &input.data()[b * cin * h * w..(b + 1) * cin * h * w];
        let y = &mut out[b * cout * pix..(b + 1) * cout * pix];
        if g.is_unit() {
            T::gemm(cout, cin, pix, T::one(), kernel.data(), cin as isize, 1, x, pix as isize, 1, T::zero(), y, pix as isize, 1);
        } else {
            let cols = im2col(x, cin, &g);
            T::gemm(cout, krows, pix, T::one(), kernel.data(), krows as isize, 1, &cols, pix as isize, 1, T::zero(), y, pix as isize, 1);
        }
    }
    add_bias(&mut out, bias, n, cout);
    Tensor::new(&[n, cout, g.out_h, g.out_w], out)
}

/// Per-channel convolution. `kernel` is `C × 1 × k_h × k_w`.
pub fn depthwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = expect_rank4("depthwise_conv2d", input)?;
    let [kc, one, kh, kw] = expect_rank4("depthwise_conv2d", kernel)?;
    if kc != c || one != 1 {
        return Err(Error::shape("depthwise_conv2d", input.shape(), kernel.shape()));
    }
    check_bias("depthwise_conv2d", bias, c)?;
    let g = ConvGeometry::new(h, w, kh, kw, stride, padding)?;
    let mut out = vec![T::zero(); n * c * g.out_h * g.out_w];
    for b in 0..n {
        for ch in 0..c {
            let x = input.plane(b, ch);
            let k = &kernel.data()[ch * kh * kw..(ch + 1) * kh * kw];
            let y = &mut out[(b * c + ch) * g.out_h * g.out_w..][..g.out_h * g.out_w];
            depthwise_plane(x, k, &g, y);
        }
    }
    add_bias(&mut out, bias, n, c);
    Tensor::new(&[n, c, g.out_h, g.out_w], out)
}

fn depthwise_plane<T: Scalar>(x: &[T], k: &[T], g: &ConvGeometry, y: &mut [T]) {
    let s = g.stride;
    y.fill(T::zero());
    for oy in 0..g.out_h {
        let yrow = &mut y[oy * g.out_w..(oy + 1) * g.out_w];
        for ky in 0..g.k_h {
            let Some(iy) = g.in_coord(oy, ky, g.pad_top, g.in_h) else {
                continue;
            };
            let xrow = &x[iy * g.in_w..(iy + 1) * g.in_w];
            for kx in 0..g.k_w {
                let kv = k[ky * g.k_w + kx];
                // Output columns whose tap `ox·s + kx − pad` lands inside the row.
                let lo = g.pad_left.saturating_sub(kx).div_ceil(s);
                let hi = ((g.in_w + g.pad_left).saturating_sub(kx)).div_ceil(s).min(g.out_w);
                if lo >= hi {
                    continue;
                }
                let first = lo * s + kx - g.pad_left;
                if s == 1 {
                    for (o, &v) in yrow[lo..hi].iter_mut().zip(&xrow[first..]) {
                        *o = *o + kv * v;
                    }
                } else {
                    for (o, &v) in yrow[lo..hi].iter_mut().zip(xrow[first..].iter().step_by(s)) {
                        *o = *o + kv * v;
                    }
                }
            }
        }
    }
}

/// Per-pixel channel mixing. `kernel` is `C_out × C_in × 1 × 1`.
pub fn pointwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [_, _, kh, kw] = expect_rank4("pointwise_conv2d", kernel)?;
    if kh != 1 || kw != 1 {
        return Err(Error::invalid(
            "pointwise_conv2d",
            format!("kernel must be 1×1, got {:?}", kernel.shape()),
        ));
    }
    conv2d(input, kernel, bias, 1, Padding::Valid)
}

/// Transposed convolution with full (unpadded) output extents `(n - 1)·stride + k`.
///
/// `kernel` is `C_in × C_out × k_h × k_w`; the operation is the adjoint of
/// [`conv2d`] with the same kernel, stride and valid padding.
pub fn transposed_conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    transposed_conv2d_padded(input, kernel, None, stride, Padding::Valid)
}

pub(crate) fn transposed_geometry(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    if stride == 0 {
        return Err(Error::invalid("transposed_conv2d", "stride must be at least 1"));
    }
    let (oh, ow) = match padding {
        Padding::Valid => ((h - 1) * stride + kh, (w - 1) * stride + kw),
        Padding::Same => (h * stride, w * stride),
    };
    let g = ConvGeometry::new(oh, ow, kh, kw, stride, padding)?;
    debug_assert_eq!((g.out_h, g.out_w), (h, w));
    Ok(g)
}

/// Transposed convolution; with [`Padding::Same`] the output is exactly `n·stride`
/// and the op is the adjoint of a same-padded [`conv2d`].
pub fn transposed_conv2d_padded<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let [n, cin, h, w] = expect_rank4("transposed_conv2d", input)?;
    let [kcin, cout, kh, kw] = expect_rank4("transposed_conv2d", kernel)?;
    if kcin != cin {
        return Err(Error::shape("transposed_conv2d", input.shape(), kernel.shape()));
    }
    check_bias("transposed_conv2d", bias, cout)?;
    let g = transposed_geometry(h, w, kh, kw, stride, padding)?;
    let pix = h * w;
    let rows = cout * kh * kw;
    let plane_out = g.in_h * g.in_w;
    let mut out = vec![T::zero(); n * cout * plane_out];
    let mut cols = vec![T::zero(); rows * pix];
    for b in 0..n {
        let x = &input.data()[b * cin * pix..(b + 1) * cin * pix];
        // cols = kernelᵀ · x, kernel viewed as cin × rows
        T::gemm(rows, cin, pix, T::one(), kernel.data(), 1, rows as isize, x, pix as isize, 1, T::zero(), &mut cols, pix as isize, 1);
        col2im(&cols, cout, &g, &mut out[b * cout * plane_out..(b + 1) * cout * plane_out]);
    }
    add_bias(&mut out, bias, n, cout);
    Tensor::new(&[n, cout, g.in_h, g.in_w], out)
}

/// Gradients of a standard convolution: `(d_input, d_kernel, d_bias)`.
pub(crate) fn conv2d_backward(
    input: &Tensor<f64>,
    kernel: &Tensor<f64>,
    grad_out: &Tensor<f64>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<f64>, Tensor<f64>, Vec<f64>)> {
    let [n, cin, h, w] = input.dims4();
    let [cout, _, kh, kw] = kernel.dims4();
    let g = ConvGeometry::new(h, w, kh, kw, stride, padding)?;
    let pix = g.out_h * g.out_w;
    let krows = cin * kh * kw;
    let mut dx = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; cout];
    let mut dcols = vec![0.0; krows * pix];
    for b in 0..n {
        let x = &input.data()[b * cin * h * w..(b + 1) * cin * h * w];
        let gy = &grad_out.data()[b * cout * pix..(b + 1) * cout * pix];
        for (c, d) in db.iter_mut().enumerate() {
            *d += gy[c * pix..(c + 1) * pix].iter().sum::<f64>();
        }
        let dxb = &mut dx[b * cin * h * w..(b + 1) * cin * h * w];
        if g.is_unit() {
            f64::gemm(cout, pix, cin, 1.0, gy, pix as isize, 1, x, 1, pix as isize, 1.0, &mut dk, cin as isize, 1);
            f64::gemm(cin, cout, pix, 1.0, kernel.data(), 1, cin as isize, gy, pix as isize, 1, 0.0, dxb, pix as isize, 1);
        } else {
            let cols = im2col(x, cin, &g);
            f64::gemm(cout, pix, krows, 1.0, gy, pix as isize, 1, &cols, 1, pix as isize, 1.0, &mut dk, krows as isize, 1);
            f64::gemm(krows, cout, pix, 1.0, kernel.data(), 1, krows as isize, gy, pix as isize, 1, 0.0, &mut dcols, pix as isize, 1);
            col2im(&dcols, cin, &g, dxb);
        }
    }
    Ok((
        Tensor::new(input.shape(), dx)?,
        Tensor::new(kernel.shape(), dk)?,
        db,
    ))
}

pub(crate) fn depthwise_backward(
    input: &Tensor<f64>,
    kernel: &Tensor<f64>,
    grad_out: &Tensor<f64>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<f64>, Tensor<f64>, Vec<f64>)> {
    let [n, c, h, w] = input.dims4();
    let [_, _, kh, kw] = kernel.dims4();
    let g = ConvGeometry::new(h, w, kh, kw, stride, padding)?;
    let mut dx = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let x = input.plane(b, ch);
            let gy = grad_out.plane(b, ch);
            let k = &kernel.data()[ch * kh * kw..(ch + 1) * kh * kw];
            let dxp = &mut dx[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let dkp = &mut dk[ch * kh * kw..(ch + 1) * kh * kw];
            db[ch] += gy.iter().sum::<f64>();
            for oy in 0..g.out_h {
                for ky in 0..kh {
                    let Some(iy) = g.in_coord(oy, ky, g.pad_top, h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        let go = gy[oy * g.out_w + ox];
                        for kx in 0..kw {
                            if let Some(ix) = g.in_coord(ox, kx, g.pad_left, w) {
                                dxp[iy * w + ix] += go * k[ky * kw + kx];
                                dkp[ky * kw + kx] += go * x[iy * w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), dx)?,
        Tensor::new(kernel.shape(), dk)?,
        db,
    ))
}

pub(crate) fn transposed_backward(
    input: &Tensor<f64>,
    kernel: &Tensor<f64>,
    grad_out: &Tensor<f64>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<f64>, Tensor<f64>, Vec<f64>)> {
    let [n, cin, h, w] = input.dims4();
    let [_, cout, kh, kw] = kernel.dims4();
    let g = transposed_geometry(h, w, kh, kw, stride, padding)?;
    let pix = h * w;
    let rows = cout * kh * kw;
    let plane_out = g.in_h * g.in_w;
    let mut dx = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; cout];
    for b in 0..n {
        let x = &input.data()[b * cin * pix..(b + 1) * cin * pix];
        let gy = &grad_out.data()[b * cout * plane_out..(b + 1) * cout * plane_out];
        for (c, d) in db.iter_mut().enumerate() {
            *d += gy[c * plane_out..(c + 1) * plane_out].iter().sum::<f64>();
        }
        let gcols = im2col(gy, cout, &g);
        // dx = kernel · gcols ; dk = x · gcolsᵀ
        f64::gemm(cin, rows, pix, 1.0, kernel.data(), rows as isize, 1, &gcols, pix as isize, 1, 0.0, &mut dx[b * cin * pix..(b + 1) * cin * pix], pix as isize, 1);
        f64::gemm(cin, pix, rows, 1.0, x, pix as isize, 1, &gcols, 1, pix as isize, 1.0, &mut dk, rows as isize, 1);
    }
    Ok((
        Tensor::new(input.shape(), dx)?,
        Tensor::new(kernel.shape(), dk)?,
        db,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_extents() {
        let g = ConvGeometry::new(7, 8, 3, 3, 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 4));
        assert_eq!((g.pad_top, g.pad_left), (1, 0));
        let g = ConvGeometry::new(16, 16, 3, 3, 1, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w, g.pad_top), (16, 16, 1));
    }

    #[test]
    fn ones_times_two() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 1, 1], 2.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &k, Some(&b), 1, Padding::Same).unwrap();
        assert_eq!(y, Tensor::full(&[1, 1, 3, 3], 2.0));
    }

    #[test]
    fn identity_kernel_keeps_interior() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 5, 6], |i| i as f64 * 0.5 - 3.0);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv2d(&x, &k, None, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 4]);
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(y.at4(0, 0, r, c), x.at4(0, 0, r + 1, c + 1));
            }
        }
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let k = Tensor::<f32>::zeros(&[2, 4, 3, 3]);
        let err = conv2d(&x, &k, None, 1, Padding::Same).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 4, 4]") && err.contains("[2, 4, 3, 3]"), "{err}");
        let dk = Tensor::<f32>::zeros(&[4, 1, 3, 3]);
        assert!(depthwise_conv2d(&x, &dk, None, 1, Padding::Same).is_err());
        assert!(pointwise_conv2d(&x, &Tensor::zeros(&[2, 3, 3, 3]), None).is_err());
    }

    #[test]
    fn depthwise_zero_kernel_and_channel_independence() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 5, 5], |i| if i < 25 { i as f64 } else { 0.0 });
        let zero_k = Tensor::zeros(&[2, 1, 3, 3]);
        let y = depthwise_conv2d(&x, &zero_k, None, 1, Padding::Same).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let k = Tensor::full(&[2, 1, 3, 3], 0.3);
        let b = Tensor::new(&[2], vec![0.0, 1.5]).unwrap();
        let y = depthwise_conv2d(&x, &k, Some(&b), 1, Padding::Same).unwrap();
        assert!(y.plane(0, 1).iter().all(|&v| v == 1.5));
    }

    #[test]
    fn transposed_unit_kernel_scales() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 4], |i| i as f64);
        let k = Tensor::full(&[1, 1, 1, 1], 2.5);
        let y = transposed_conv2d(&x, &k, 1).unwrap();
        assert_eq!(y, x.scale(2.5));
    }

    #[test]
    fn transposed_same_doubles_extent() {
        let x = Tensor::<f32>::zeros(&[1, 3, 16, 16]);
        let k = Tensor::<f32>::zeros(&[3, 5, 4, 4]);
        let y = transposed_conv2d_padded(&x, &k, None, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 5, 32, 32]);
        let y = transposed_conv2d(&x, &k, 2).unwrap();
        assert_eq!(y.shape(), &[1, 5, 34, 34]);
    }
}

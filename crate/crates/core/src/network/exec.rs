//! One graph definition, two executors: eager tensors and the gradient tape.

use std::collections::HashMap;

use super::arch::{Architecture, ConvLayer, LayerKind};
use super::params::ParamSet;
use super::spec::{NetworkSpec, Upsampling};
use super::LOCATION_UNIT_MM;
use crate::error::Result;
use crate::tensor::{
    self, activation, batchnorm, bilinear_resize, concat, conv2d, depthwise_conv2d,
    slice_channels, transposed_conv2d_padded, BatchNormParams, Padding, Scalar, Tape, Tensor, Var,
};

/// The eight maps a forward pass produces, each `N × J × h × w`. The deltas
/// and bone lengths sit at the base resolution, half that of the others.
#[derive(Clone, Debug, PartialEq)]
pub struct Maps<V> {
    pub heatmaps: V,
    pub x: V,
    pub y: V,
    pub z: V,
    pub delta_x: V,
    pub delta_y: V,
    pub delta_z: V,
    pub bone_length: V,
}

impl<V> Maps<V> {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &V)> {
        [
            ("H", &self.heatmaps),
            ("X", &self.x),
            ("Y", &self.y),
            ("Z", &self.z),
            ("dX", &self.delta_x),
            ("dY", &self.delta_y),
            ("dZ", &self.delta_z),
            ("BL", &self.bone_length),
        ]
        .into_iter()
    }
}

pub(crate) trait Backend {
    type Value: Clone;

    fn conv(&mut self, layer: &ConvLayer, x: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn upsample2x(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn bone_length(&mut self, dx: &Self::Value, dy: &Self::Value, dz: &Self::Value) -> Result<Self::Value>;
    fn concat(&mut self, xs: &[&Self::Value]) -> Result<Self::Value>;
    fn slice(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn scale(&mut self, x: &Self::Value, k: f64) -> Result<Self::Value>;
}

pub(crate) fn run<B: Backend>(
    arch: &Architecture,
    spec: &NetworkSpec,
    b: &mut B,
    input: &B::Value,
) -> Result<Maps<B::Value>> {
    let mut x = b.conv(&arch.stem, input)?;
    for blk in &arch.blocks {
        let mut y = match &blk.expand {
            Some(e) => b.conv(e, &x)?,
            None => x.clone(),
        };
        y = b.conv(&blk.depthwise, &y)?;
        y = b.conv(&blk.project, &y)?;
        x = if blk.residual { b.add(&x, &y)? } else { y };
    }
    for l in &arch.block13_a {
        x = b.conv(l, &x)?;
    }
    let j = spec.joint_count;
    let delta = b.conv(&arch.delta, &x)?;
    let delta_x = b.slice(&delta, 0, j)?;
    let delta_y = b.slice(&delta, j, j)?;
    let delta_z = b.slice(&delta, 2 * j, j)?;
    let bone_length = b.bone_length(&delta_x, &delta_y, &delta_z)?;

    let mut y = b.concat(&[&x, &delta, &bone_length])?;
    for l in &arch.block13_b {
        y = b.conv(l, &y)?;
    }
    if arch.upsampling == Upsampling::BilinearConv {
        y = b.upsample2x(&y)?;
    }
    y = b.conv(&arch.upsample, &y)?;
    let out = b.conv(&arch.head, &y)?;

    let heatmaps = b.slice(&out, 0, j)?;
    let raw_x = b.slice(&out, j, j)?;
    let raw_y = b.slice(&out, 2 * j, j)?;
    let raw_z = b.slice(&out, 3 * j, j)?;
    Ok(Maps {
        heatmaps,
        x: b.scale(&raw_x, LOCATION_UNIT_MM)?,
        y: b.scale(&raw_y, LOCATION_UNIT_MM)?,
        z: b.scale(&raw_z, LOCATION_UNIT_MM)?,
        delta_x,
        delta_y,
        delta_z,
        bone_length,
    })
}

/// Eager executor over either training-form or batchnorm-folded weights.
pub(crate) struct Eager<'a, T> {
    pub params: &'a ParamSet<T>,
    pub folded: bool,
}

pub(crate) fn bn_params<T: Scalar>(params: &ParamSet<T>, layer: &ConvLayer) -> Result<BatchNormParams<T>> {
    let [g, b, m, v] = layer.bn_names();
    Ok(BatchNormParams {
        gamma: params.expect(&g)?.data().to_vec(),
        beta: params.expect(&b)?.data().to_vec(),
        mean: params.expect(&m)?.data().to_vec(),
        var: params.expect(&v)?.data().to_vec(),
        epsilon: super::arch::BN_EPSILON,
    })
}

impl<T: Scalar> Backend for Eager<'_, T> {
    type Value = Tensor<T>;

    fn conv(&mut self, l: &ConvLayer, x: &Tensor<T>) -> Result<Tensor<T>> {
        let k = self.params.expect(&l.kernel_name())?;
        let has_bias = l.bias || (self.folded && l.batchnorm);
        let bias = if has_bias {
            Some(self.params.expect(&l.bias_name())?)
        } else {
            None
        };
        let mut y = match l.kind {
            LayerKind::Standard { .. } => conv2d(x, k, bias, l.stride, Padding::Same)?,
            LayerKind::Depthwise { .. } => depthwise_conv2d(x, k, bias, l.stride, Padding::Same)?,
            LayerKind::Pointwise => tensor::pointwise_conv2d(x, k, bias)?,
            LayerKind::Transposed { .. } => transposed_conv2d_padded(x, k, bias, l.stride, Padding::Same)?,
        };
        if l.batchnorm && !self.folded {
            y = batchnorm(&y, &bn_params(self.params, l)?)?;
        }
        Ok(activation(&y, l.activation))
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::add(a, b)
    }

    fn upsample2x(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, _, h, w] = x.dims4();
        bilinear_resize(x, h * 2, w * 2)
    }

    fn bone_length(&mut self, dx: &Tensor<T>, dy: &Tensor<T>, dz: &Tensor<T>) -> Result<Tensor<T>> {
        super::bone_length_features(dx, dy, dz)
    }

    fn concat(&mut self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        concat(xs)
    }

    fn slice(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        slice_channels(x, start, len)
    }

    fn scale(&mut self, x: &Tensor<T>, k: f64) -> Result<Tensor<T>> {
        Ok(x.scale(T::cast_from(k)))
    }
}

/// Records the graph on a tape. Trainable weights are leaves in `vars`;
/// batchnorm statistics are read as constants from `stats`.
pub(crate) struct Recorder<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a HashMap<String, Var>,
    pub stats: &'a ParamSet<f64>,
}

impl Recorder<'_> {
    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| crate::Error::WeightMismatch {
                name: name.to_owned(),
                reason: "has no tape variable".into(),
            })
    }
}

impl Backend for Recorder<'_> {
    type Value = Var;

    fn conv(&mut self, l: &ConvLayer, x: &Var) -> Result<Var> {
        let k = self.var(&l.kernel_name())?;
        let bias = if l.bias { Some(self.var(&l.bias_name())?) } else { None };
        let mut y = match l.kind {
            LayerKind::Standard { .. } | LayerKind::Pointwise => self.tape.conv2d(*x, k, bias, l.stride, Padding::Same)?,
            LayerKind::Depthwise { .. } => self.tape.depthwise_conv2d(*x, k, bias, l.stride, Padding::Same)?,
            LayerKind::Transposed { .. } => self.tape.transposed_conv2d(*x, k, bias, l.stride, Padding::Same)?,
        };
        if l.batchnorm {
            let [g, b, m, v] = l.bn_names();
            let (g, b) = (self.var(&g)?, self.var(&b)?);
            let mean = self.stats.expect(&m)?.data().to_vec();
            let var = self.stats.expect(&v)?.data().to_vec();
            y = self.tape.batchnorm(y, g, b, &mean, &var, super::arch::BN_EPSILON)?;
        }
        Ok(self.tape.activation(y, l.activation))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn upsample2x(&mut self, x: &Var) -> Result<Var> {
        let [_, _, h, w] = self.tape.value(*x).dims4();
        self.tape.bilinear_resize(*x, h * 2, w * 2)
    }

    fn bone_length(&mut self, dx: &Var, dy: &Var, dz: &Var) -> Result<Var> {
        let (ax, ay, az) = (self.tape.abs(*dx), self.tape.abs(*dy), self.tape.abs(*dz));
        let s = self.tape.add(ax, ay)?;
        self.tape.add(s, az)
    }

    fn concat(&mut self, xs: &[&Var]) -> Result<Var> {
        let v: Vec<Var> = xs.iter().map(|&&v| v).collect();
        self.tape.concat(&v)
    }

    fn slice(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        self.tape.slice_channels(*x, start, len)
    }

    fn scale(&mut self, x: &Var, k: f64) -> Result<Var> {
        Ok(self.tape.scale(*x, k))
    }
}

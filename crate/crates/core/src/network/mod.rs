//! The MoVNect network: a truncated inverted-residual base, two Block13
//! stages joined by bone-length features, one ×2 upsampling stage and a
//! head producing per-joint heatmaps and X/Y/Z location maps.
//!
//! Master weights are kept in `f64`. Inference runs in `f32` on a copy with
//! every batchnorm folded into the preceding convolution.

pub mod arch;
mod exec;
mod params;
pub mod spec;

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use sha2::{Digest, Sha256};

pub use arch::{Architecture, ConvLayer, LayerKind};
pub use exec::Maps;
pub use params::{is_statistic, ParamSet};
pub use spec::{NetworkSpec, Upsampling, Variant};

use crate::error::{Error, Result};
use crate::tensor::io::{self, StoredTensor};
use crate::tensor::{fold_batchnorm, Activation, Precision, Scalar, Tape, Tensor, Var};

/// Location maps are regressed in metres and reported in millimetres.
pub const LOCATION_UNIT_MM: f64 = 1000.0;

pub type NetworkOutputs = Maps<Tensor<f32>>;

/// Elementwise `|ΔX| + |ΔY| + |ΔZ|`.
pub fn bone_length_features<T: Scalar>(dx: &Tensor<T>, dy: &Tensor<T>, dz: &Tensor<T>) -> Result<Tensor<T>> {
    dx.zip_map(dy, |a, b| a.abs() + b.abs())?
        .zip_map(dz, |s, c| s + c.abs())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Fan-in scaled uniform weights drawn from a seeded ChaCha stream.
    Random(u64),
    /// All kernels and biases zero; batchnorm at identity.
    Zeros,
}

/// Operation count of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub input_size: usize,
    pub macs: u64,
    pub layers: Vec<(String, u64)>,
    /// MACs in millions divided by the output map area.
    pub paper_style: f64,
}

/// Batchnorm-folded weights in the inference precision.
#[derive(Clone, Debug)]
pub struct InferenceModel<T> {
    params: ParamSet<T>,
}

impl<T: Scalar> InferenceModel<T> {
    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    arch: Architecture,
    params: ParamSet<f64>,
    inference: OnceLock<InferenceModel<f32>>,
}

impl Network {
    pub fn build(spec: NetworkSpec, init: Init) -> Result<Self> {
        spec.validate()?;
        let arch = Architecture::new(&spec);
        let mut params = ParamSet::new();
        let mut rng = match init {
            Init::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            Init::Zeros => None,
        };
        for layer in arch.layers() {
            for (name, shape) in layer.param_shapes() {
                let t = if name.ends_with("/kernel") {
                    match rng.as_mut() {
                        Some(rng) => {
                            let gain = if layer.activation == Activation::Linear && !layer.batchnorm {
                                3.0
                            } else {
                                6.0
                            };
                            let bound = (gain / layer.fan_in() as f64).sqrt();
                            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                            Tensor::from_fn(&shape, |_| dist.sample(rng))
                        }
                        None => Tensor::zeros(&shape),
                    }
                } else if name.ends_with("/bn/gamma") || name.ends_with("/bn/var") {
                    Tensor::full(&shape, 1.0)
                } else {
                    Tensor::zeros(&shape)
                };
                params.insert(name, t)?;
            }
        }
        Ok(Network {
            spec,
            arch,
            params,
            inference: OnceLock::new(),
        })
    }

    /// Builds from stored tensors. Every expected tensor must be present with
    /// the expected shape and nothing else may be; the first offending name
    /// is reported.
    pub fn from_stored(spec: NetworkSpec, items: &[(String, StoredTensor)]) -> Result<Self> {
        let mut net = Network::build(spec, Init::Zeros)?;
        let mut given: HashMap<&str, &StoredTensor> = HashMap::new();
        for (name, t) in items {
            if name.starts_with(META_PREFIX) {
                continue;
            }
            if net.params.get(name).is_none() {
                return Err(Error::WeightMismatch {
                    name: name.clone(),
                    reason: "is not a parameter of this network".into(),
                });
            }
            if given.insert(name, t).is_some() {
                return Err(Error::WeightMismatch {
                    name: name.clone(),
                    reason: "is defined twice".into(),
                });
            }
        }
        for (name, slot) in net.params.iter_mut() {
            let t = given.get(name).ok_or_else(|| Error::WeightMismatch {
                name: name.to_owned(),
                reason: "is missing".into(),
            })?;
            if t.shape() != slot.shape() {
                return Err(Error::WeightMismatch {
                    name: name.to_owned(),
                    reason: format!("has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                });
            }
            *slot = t.to_f64();
        }
        Ok(net)
    }

    /// Loads a weight file, detecting which preset it belongs to.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let items = io::load(path)?;
        let spec = detect_spec(&items)?;
        Network::from_stored(spec, &items)
    }

    pub fn load_with_spec(spec: NetworkSpec, path: impl AsRef<Path>) -> Result<Self> {
        Network::from_stored(spec, &io::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>, precision: Precision) -> Result<()> {
        io::save(path, &self.to_stored(precision))
    }

    /// Every parameter plus a `meta.input_size` entry.
    pub fn to_stored(&self, precision: Precision) -> Vec<(String, StoredTensor)> {
        let mut items: Vec<(String, StoredTensor)> = self
            .params
            .iter()
            .map(|(n, t)| {
                let s = match precision {
                    Precision::Single => StoredTensor::Single(t.cast()),
                    Precision::Double => StoredTensor::Double(t.clone()),
                };
                (n.to_owned(), s)
            })
            .collect();
        let size = Tensor::new(&[1], vec![self.spec.input_size as f64]).expect("one element");
        items.push((META_INPUT_SIZE.into(), StoredTensor::Double(size)));
        items
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet<f64> {
        &self.params
    }

    /// Mutable master weights. Invalidates the cached inference copy.
    pub fn params_mut(&mut self) -> &mut ParamSet<f64> {
        self.inference = OnceLock::new();
        &mut self.params
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<f64>) -> Result<()> {
        let slot = self.params_mut().get_mut(name).ok_or_else(|| Error::WeightMismatch {
            name: name.to_owned(),
            reason: "is not a parameter of this network".into(),
        })?;
        if slot.shape() != value.shape() {
            return Err(Error::WeightMismatch {
                name: name.to_owned(),
                reason: format!("has shape {:?}, expected {:?}", value.shape(), slot.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Every stored scalar, batchnorm statistics included.
    pub fn count_params(&self) -> usize {
        self.params.element_count()
    }

    pub fn count_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| !is_statistic(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Convolution MACs at an `input_size × input_size` input. Batchnorm,
    /// activations, resizing and elementwise work are not counted.
    pub fn count_flops(&self, input_size: usize) -> CostReport {
        let layers = self.arch.layer_macs(input_size);
        let macs = layers.iter().map(|(_, m)| m).sum();
        let map = (input_size / self.spec.output_stride).max(1);
        CostReport {
            input_size,
            macs,
            layers,
            paper_style: macs as f64 / 1e6 / (map * map) as f64,
        }
    }

    pub fn fold<T: Scalar>(&self) -> Result<InferenceModel<T>> {
        let mut out = ParamSet::new();
        for layer in self.arch.layers() {
            let k = self.params.expect(&layer.kernel_name())?;
            let b = if layer.bias {
                Some(self.params.expect(&layer.bias_name())?)
            } else {
                None
            };
            let (k, b) = if layer.batchnorm {
                let bn = exec::bn_params(&self.params, layer)?;
                let (k, b) = fold_batchnorm(k, b, &bn, layer.out_axis())?;
                (k, Some(b))
            } else {
                (k.clone(), b.cloned())
            };
            out.insert(layer.kernel_name(), k.cast())?;
            if let Some(b) = b {
                out.insert(layer.bias_name(), b.cast())?;
            }
        }
        Ok(InferenceModel { params: out })
    }

    fn inference_model(&self) -> Result<&InferenceModel<f32>> {
        if let Some(m) = self.inference.get() {
            return Ok(m);
        }
        let m = self.fold::<f32>()?;
        Ok(self.inference.get_or_init(|| m))
    }

    fn check_input<T: Scalar>(&self, image: &Tensor<T>) -> Result<()> {
        let s = self.spec.input_size;
        let ok = image.rank() == 4 && image.shape()[1..] == [3, s, s];
        if !ok {
            return Err(Error::shape("forward", image.shape(), &[image.dims4()[0], 3, s, s]));
        }
        Ok(())
    }

    /// Single-precision inference with folded batchnorm. `image` is
    /// `N × 3 × S × S` with values in [-1, 1].
    pub fn forward(&self, image: &Tensor<f32>) -> Result<NetworkOutputs> {
        self.check_input(image)?;
        let model = self.inference_model()?;
        self.forward_with(model, image)
    }

    pub fn forward_with<T: Scalar>(&self, model: &InferenceModel<T>, image: &Tensor<T>) -> Result<Maps<Tensor<T>>> {
        self.check_input(image)?;
        let mut b = exec::Eager {
            params: &model.params,
            folded: true,
        };
        exec::run(&self.arch, &self.spec, &mut b, image)
    }

    /// Double-precision pass over the unfolded master weights.
    pub fn forward_f64(&self, image: &Tensor<f64>) -> Result<Maps<Tensor<f64>>> {
        self.check_input(image)?;
        let mut b = exec::Eager {
            params: &self.params,
            folded: false,
        };
        exec::run(&self.arch, &self.spec, &mut b, image)
    }

    /// Adds every trainable weight to `tape` as a leaf.
    pub fn tape_leaves(&self, tape: &mut Tape) -> HashMap<String, Var> {
        self.params
            .iter()
            .filter(|(n, _)| !is_statistic(n))
            .map(|(n, t)| (n.to_owned(), tape.leaf(t.clone())))
            .collect()
    }

    /// Records a training forward pass (batchnorm statistics frozen).
    pub fn forward_tape(&self, tape: &mut Tape, leaves: &HashMap<String, Var>, input: Var) -> Result<Maps<Var>> {
        self.check_input(tape.value(input))?;
        let mut b = exec::Recorder {
            tape,
            vars: leaves,
            stats: &self.params,
        };
        exec::run(&self.arch, &self.spec, &mut b, &input)
    }
}

const META_PREFIX: &str = "meta.";
const META_INPUT_SIZE: &str = "meta.input_size";

fn stored_input_size(items: &[(String, StoredTensor)]) -> Result<Option<usize>> {
    let Some((_, t)) = items.iter().find(|(n, _)| n == META_INPUT_SIZE) else {
        return Ok(None);
    };
    let v = t.to_f64();
    match v.data() {
        [s] if *s >= 1.0 && s.fract() == 0.0 => Ok(Some(*s as usize)),
        _ => Err(Error::WeightFormat(format!("bad {META_INPUT_SIZE} entry {:?}", v.data()))),
    }
}

/// Finds the preset whose parameter inventory matches `items` exactly. The
/// input size comes from the file when recorded and is 256 otherwise.
pub fn detect_spec(items: &[(String, StoredTensor)]) -> Result<NetworkSpec> {
    let size = stored_input_size(items)?;
    let given: HashMap<&str, &[usize]> = items
        .iter()
        .filter(|(n, _)| !n.starts_with(META_PREFIX))
        .map(|(n, t)| (n.as_str(), t.shape()))
        .collect();
    for v in Variant::PRESETS {
        let spec = NetworkSpec::preset(v);
        let arch = Architecture::new(&spec);
        let expected: Vec<(String, Vec<usize>)> = arch.layers().flat_map(|l| l.param_shapes()).collect();
        if expected.len() == given.len()
            && expected
                .iter()
                .all(|(n, s)| given.get(n.as_str()).is_some_and(|g| *g == s.as_slice()))
        {
            return Ok(match size {
                Some(s) => spec.with_input_size(s),
                None => spec,
            });
        }
    }
    Err(Error::WeightFormat(
        "weights do not match any of the type-a, type-b or type-c layouts".into(),
    ))
}

/// Maps 8-bit RGB pixels (row-major, interleaved) to a `1 × 3 × h × w`
/// tensor in [-1, 1].
pub fn normalize_rgb8(pixels: &[u8], width: usize, height: usize) -> Result<Tensor<f32>> {
    if pixels.len() != width * height * 3 {
        return Err(Error::invalid(
            "normalize_rgb8",
            format!("{}×{} RGB needs {} bytes, got {}", width, height, width * height * 3, pixels.len()),
        ));
    }
    let plane = width * height;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (px[c] as f64 / 127.5 - 1.0) as f32;
        }
    }
    Tensor::new(&[1, 3, height, width], data)
}

/// SHA-256 over every output map with values rounded to four significant
/// digits, so the digest survives last-bit differences between GEMM kernels.
pub fn output_digest<T: Scalar>(maps: &Maps<Tensor<T>>) -> String {
    let mut h = Sha256::new();
    for (name, t) in maps.iter() {
        h.update(name.as_bytes());
        for &e in t.shape() {
            h.update((e as u64).to_le_bytes());
        }
        for v in t.data() {
            let v = v.as_f64();
            let v = if v.abs() < 1e-9 { 0.0 } else { v };
            h.update(format!("{v:.3e};").as_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkSpec {
        NetworkSpec {
            variant: Variant::Custom,
            input_size: 32,
            joint_count: 3,
            block13a_widths: vec![8, 8],
            block13b_widths: vec![8, 8],
            upsampling: Upsampling::BilinearConv,
            output_stride: 8,
        }
    }

    #[test]
    fn preset_parameter_counts() {
        for (v, lo, hi) in [(Variant::TypeA, 1.1e6, 1.18e6), (Variant::TypeB, 1.2e6, 1.3e6)] {
            let n = Network::build(NetworkSpec::preset(v), Init::Zeros).unwrap().count_params() as f64;
            assert!(n > lo && n < hi, "{v}: {n}");
        }
    }

    #[test]
    fn output_shapes() {
        let net = Network::build(tiny(), Init::Random(1)).unwrap();
        let out = net.forward(&Tensor::zeros(&[2, 3, 32, 32])).unwrap();
        for (name, t) in out.iter() {
            let side = if name.starts_with('d') || name == "BL" { 2 } else { 4 };
            assert_eq!(t.shape(), &[2, 3, side, side], "{name}");
        }
        let mut b = tiny();
        b.upsampling = Upsampling::TransposedConv;
        let net = Network::build(b, Init::Random(1)).unwrap();
        let out = net.forward(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert_eq!(out.heatmaps.shape(), &[1, 3, 4, 4]);
    }

    #[test]
    fn wrong_input_is_rejected() {
        let net = Network::build(tiny(), Init::Zeros).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
    }

    #[test]
    fn stored_round_trip_and_first_offender() {
        let net = Network::build(tiny(), Init::Random(3)).unwrap();
        let items = net.to_stored(Precision::Double);
        let back = Network::from_stored(tiny(), &items).unwrap();
        assert_eq!(back.params(), net.params());

        let mut broken = items.clone();
        broken.retain(|(n, _)| n != "head/bias");
        match Network::from_stored(tiny(), &broken) {
            Err(Error::WeightMismatch { name, .. }) => assert_eq!(name, "head/bias"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bone_length_is_l1() {
        let a = Tensor::<f64>::new(&[3], vec![1.0, -2.0, 0.0]).unwrap();
        let b = Tensor::<f64>::new(&[3], vec![-1.0, 0.5, 0.0]).unwrap();
        let c = Tensor::<f64>::new(&[3], vec![0.0, 1.0, -3.0]).unwrap();
        let bl = bone_length_features(&a, &b, &c).unwrap();
        assert_eq!(bl.data(), &[2.0, 3.5, 3.0]);
    }
}

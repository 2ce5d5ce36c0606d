//! Layer inventory of a MoVNect network.
//!
//! Base: the inverted-residual schedule truncated after block 12
//! (stride 16, 96 channels). Each Block13 width is a depthwise 3×3 +
//! pointwise pair, both followed by batchnorm and ReLU6. A linear pointwise
//! head off Block13_a yields ΔX/ΔY/ΔZ; their L1 bone-length map is
//! concatenated with the Block13_a features and the deltas before Block13_b.
//! One ×2 upsampling stage and a linear 4J-channel pointwise head follow.

use super::spec::{NetworkSpec, Upsampling};
use crate::tensor::{Activation, ConvGeometry, Padding};

pub const BN_EPSILON: f64 = 1e-3;

/// Inverted-residual schedule (expansion, output channels, repeats, first stride)
/// through block 12.
const BASE_SCHEDULE: [(usize, usize, usize, usize); 5] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
];
const STEM_CHANNELS: usize = 32;
pub const BASE_CHANNELS: usize = 96;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Standard { k: usize },
    Depthwise { k: usize },
    Pointwise,
    /// Kernel is `C_in × C_out × k × k`, same-padded so the extent grows by `stride`.
    Transposed { k: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub batchnorm: bool,
    pub bias: bool,
    pub activation: Activation,
}

impl ConvLayer {
    fn bn_relu6(name: String, kind: LayerKind, cin: usize, cout: usize, stride: usize) -> Self {
        ConvLayer {
            name,
            kind,
            cin,
            cout,
            stride,
            batchnorm: true,
            bias: false,
            activation: Activation::Relu6,
        }
    }

    fn linear_bn(name: String, cin: usize, cout: usize) -> Self {
        ConvLayer {
            activation: Activation::Linear,
            ..Self::bn_relu6(name, LayerKind::Pointwise, cin, cout, 1)
        }
    }

    fn linear_head(name: &str, cin: usize, cout: usize) -> Self {
        ConvLayer {
            name: name.to_owned(),
            kind: LayerKind::Pointwise,
            cin,
            cout,
            stride: 1,
            batchnorm: false,
            bias: true,
            activation: Activation::Linear,
        }
    }

    pub fn kernel_name(&self) -> String {
        format!("{}/kernel", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}/bias", self.name)
    }

    /// Names of gamma, beta, running mean and running variance.
    pub fn bn_names(&self) -> [String; 4] {
        ["gamma", "beta", "mean", "var"].map(|p| format!("{}/bn/{p}", self.name))
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        match self.kind {
            LayerKind::Standard { k } => [self.cout, self.cin, k, k],
            LayerKind::Depthwise { k } => [self.cin, 1, k, k],
            LayerKind::Pointwise => [self.cout, self.cin, 1, 1],
            LayerKind::Transposed { k } => [self.cin, self.cout, k, k],
        }
    }

    /// Kernel axis that indexes output channels.
    pub fn out_axis(&self) -> usize {
        match self.kind {
            LayerKind::Transposed { .. } => 1,
            _ => 0,
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Standard { k } => self.cin * k * k,
            LayerKind::Depthwise { k } => k * k,
            LayerKind::Pointwise => self.cin,
            LayerKind::Transposed { k } => self.cin * k * k / (self.stride * self.stride),
        }
    }

    /// Every weight tensor of the layer with its shape, in file order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![(self.kernel_name(), self.kernel_shape().to_vec())];
        if self.bias {
            out.push((self.bias_name(), vec![self.cout]));
        }
        if self.batchnorm {
            out.extend(self.bn_names().map(|n| (n, vec![self.cout])));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            LayerKind::Transposed { .. } => (h * self.stride, w * self.stride),
            LayerKind::Standard { k } | LayerKind::Depthwise { k } => {
                let g = ConvGeometry::new(h, w, k, k, self.stride, Padding::Same).expect("geometry");
                (g.out_h, g.out_w)
            }
            LayerKind::Pointwise => (h, w),
        }
    }

    /// Multiply-accumulates for one input of extent `h × w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_extent(h, w);
        let out_px = (oh * ow) as u64;
        let (cin, cout) = (self.cin as u64, self.cout as u64);
        match self.kind {
            LayerKind::Standard { k } => (k * k) as u64 * cin * cout * out_px,
            LayerKind::Depthwise { k } => (k * k) as u64 * cin * out_px,
            LayerKind::Pointwise => cin * cout * out_px,
            LayerKind::Transposed { k } => (k * k) as u64 * cin * cout * (h * w) as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub expand: Option<ConvLayer>,
    pub depthwise: ConvLayer,
    pub project: ConvLayer,
    pub residual: bool,
}

impl Bottleneck {
    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.expand
            .iter()
            .chain([&self.depthwise, &self.project])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub stem: ConvLayer,
    pub blocks: Vec<Bottleneck>,
    pub block13_a: Vec<ConvLayer>,
    pub delta: ConvLayer,
    pub block13_b: Vec<ConvLayer>,
    pub upsampling: Upsampling,
    pub upsample: ConvLayer,
    pub head: ConvLayer,
}

fn separable_stack(prefix: &str, mut cin: usize, widths: &[usize]) -> Vec<ConvLayer> {
    let mut out = Vec::with_capacity(widths.len() * 2);
    for (i, &w) in widths.iter().enumerate() {
        out.push(ConvLayer::bn_relu6(
            format!("{prefix}/{i}/depthwise"),
            LayerKind::Depthwise { k: 3 },
            cin,
            cin,
            1,
        ));
        out.push(ConvLayer::bn_relu6(
            format!("{prefix}/{i}/pointwise"),
            LayerKind::Pointwise,
            cin,
            w,
            1,
        ));
        cin = w;
    }
    out
}

impl Architecture {
    pub fn new(spec: &NetworkSpec) -> Self {
        let j = spec.joint_count;
        let stem = ConvLayer::bn_relu6("stem".into(), LayerKind::Standard { k: 3 }, 3, STEM_CHANNELS, 2);
        let mut blocks = Vec::new();
        let mut cin = STEM_CHANNELS;
        for &(t, c, n, s) in &BASE_SCHEDULE {
            for r in 0..n {
                let i = blocks.len();
                let stride = if r == 0 { s } else { 1 };
                let hidden = cin * t;
                let expand = (t != 1).then(|| {
                    ConvLayer::bn_relu6(format!("block_{i}/expand"), LayerKind::Pointwise, cin, hidden, 1)
                });
                blocks.push(Bottleneck {
                    expand,
                    depthwise: ConvLayer::bn_relu6(
                        format!("block_{i}/depthwise"),
                        LayerKind::Depthwise { k: 3 },
                        hidden,
                        hidden,
                        stride,
                    ),
                    project: ConvLayer::linear_bn(format!("block_{i}/project"), hidden, c),
                    residual: stride == 1 && cin == c,
                });
                cin = c;
            }
        }
        debug_assert_eq!(cin, BASE_CHANNELS);

        let block13_a = separable_stack("block13_a", BASE_CHANNELS, &spec.block13a_widths);
        let a_out = *spec.block13a_widths.last().expect("validated");
        let delta = ConvLayer::linear_head("delta", a_out, 3 * j);
        let block13_b = separable_stack("block13_b", a_out + 4 * j, &spec.block13b_widths);
        let b_out = *spec.block13b_widths.last().expect("validated");
        let upsample = match spec.upsampling {
            Upsampling::BilinearConv => ConvLayer::bn_relu6(
                "upsample/conv".into(),
                LayerKind::Standard { k: 3 },
                b_out,
                b_out,
                1,
            ),
            Upsampling::TransposedConv => ConvLayer::bn_relu6(
                "upsample/deconv".into(),
                LayerKind::Transposed { k: 4 },
                b_out,
                b_out,
                2,
            ),
        };
        let head = ConvLayer::linear_head("head", b_out, 4 * j);
        Architecture {
            stem,
            blocks,
            block13_a,
            delta,
            block13_b,
            upsampling: spec.upsampling,
            upsample,
            head,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        std::iter::once(&self.stem)
            .chain(self.blocks.iter().flat_map(Bottleneck::layers))
            .chain(&self.block13_a)
            .chain(std::iter::once(&self.delta))
            .chain(&self.block13_b)
            .chain([&self.upsample, &self.head])
    }

    /// Per-layer `(name, MACs)` for an input of `size × size` pixels, in execution order.
    pub fn layer_macs(&self, size: usize) -> Vec<(String, u64)> {
        let mut out = Vec::new();
        let mut ext = (size, size);
        let mut visit = |l: &ConvLayer, ext: &mut (usize, usize)| {
            out.push((l.name.clone(), l.macs(ext.0, ext.1)));
            *ext = l.output_extent(ext.0, ext.1);
        };
        visit(&self.stem, &mut ext);
        for l in self.blocks.iter().flat_map(Bottleneck::layers) {
            visit(l, &mut ext);
        }
        for l in &self.block13_a {
            visit(l, &mut ext);
        }
        let base_ext = ext;
        visit(&self.delta, &mut ext);
        ext = base_ext;
        for l in &self.block13_b {
            visit(l, &mut ext);
        }
        if self.upsampling == Upsampling::BilinearConv {
            ext = (ext.0 * 2, ext.1 * 2);
        }
        visit(&self.upsample, &mut ext);
        visit(&self.head, &mut ext);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::spec::Variant;

    #[test]
    fn base_ends_at_stride_sixteen_with_96_channels() {
        let arch = Architecture::new(&NetworkSpec::type_a());
        assert_eq!(arch.blocks.len(), 13);
        assert_eq!(arch.blocks.last().unwrap().project.cout, 96);
        let strides: usize = std::iter::once(arch.stem.stride)
            .chain(arch.blocks.iter().map(|b| b.depthwise.stride))
            .product();
        assert_eq!(strides, 16);
    }

    #[test]
    fn names_are_unique() {
        for v in Variant::PRESETS {
            let arch = Architecture::new(&NetworkSpec::preset(v));
            let mut names: Vec<String> = arch
                .layers()
                .flat_map(|l| l.param_shapes().into_iter().map(|(n, _)| n))
                .collect();
            let n = names.len();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), n);
        }
    }

    #[test]
    fn single_pointwise_macs() {
        let l = ConvLayer::linear_head("x", 8, 16);
        assert_eq!(l.macs(32, 32), 8 * 16 * 32 * 32);
        assert_eq!(l.macs(32, 32), 131_072);
    }
}

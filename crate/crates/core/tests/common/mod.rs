#![allow(dead_code)]

use movnect::tensor::tape::BlendedNorm;
use movnect::tensor::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Output extent and leading pad of a same-padded axis.
pub fn same_axis(n: usize, k: usize, s: usize) -> (usize, usize) {
    let out = n.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(n);
    (out, total / 2)
}

fn axis(n: usize, k: usize, s: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Same => same_axis(n, k, s),
        Padding::Valid => ((n - k) / s + 1, 0),
    }
}

pub fn ref_conv2d(x: &Tensor<f64>, k: &Tensor<f64>, b: Option<&Tensor<f64>>, s: usize, padding: Padding) -> Tensor<f64> {
    let [n, cin, h, w] = x.dims4();
    let [cout, _, kh, kw] = k.dims4();
    let (oh, pt) = axis(h, kh, s, padding);
    let (ow, pl) = axis(w, kw, s, padding);
    let mut out = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky) as isize - pt as isize;
                                let ix = (ox * s + kx) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.at4(bi, ci, iy as usize, ix as usize) * k.at4(co, ci, ky, kx);
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

pub fn ref_depthwise(x: &Tensor<f64>, k: &Tensor<f64>, b: Option<&Tensor<f64>>, s: usize, padding: Padding) -> Tensor<f64> {
    let [n, c, h, w] = x.dims4();
    let [_, _, kh, kw] = k.dims4();
    let (oh, pt) = axis(h, kh, s, padding);
    let (ow, pl) = axis(w, kw, s, padding);
    let mut out = vec![0.0; n * c * oh * ow];
    for bi in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[ch]);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * s + ky) as isize - pt as isize;
                            let ix = (ox * s + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x.at4(bi, ch, iy as usize, ix as usize) * k.at4(ch, 0, ky, kx);
                        }
                    }
                    out[((bi * c + ch) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out).unwrap()
}

/// Scatter form: every input pixel adds `x · kernel` at `i·s + k − pad`.
pub fn ref_transposed(x: &Tensor<f64>, k: &Tensor<f64>, b: Option<&Tensor<f64>>, s: usize, padding: Padding) -> Tensor<f64> {
    let [n, cin, h, w] = x.dims4();
    let [_, cout, kh, kw] = k.dims4();
    let (oh, ow, pt, pl) = match padding {
        Padding::Valid => ((h - 1) * s + kh, (w - 1) * s + kw, 0, 0),
        Padding::Same => (h * s, w * s, same_axis(h * s, kh, s).1, same_axis(w * s, kw, s).1),
    };
    let mut out = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            let base = (bi * cout + co) * oh * ow;
            if let Some(b) = b {
                out[base..base + oh * ow].iter_mut().for_each(|v| *v = b.data()[co]);
            }
            for ci in 0..cin {
                for iy in 0..h {
                    for ix in 0..w {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * s + ky) as isize - pt as isize;
                                let ox = (ix * s + kx) as isize - pl as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                out[base + oy as usize * ow + ox as usize] += x.at4(bi, ci, iy, ix) * k.at4(ci, co, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

pub fn ref_bilinear(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.dims4();
    let src = |d: usize, inn: usize, out: usize| {
        let p = ((d as f64 + 0.5) * inn as f64 / out as f64 - 0.5).max(0.0).min((inn - 1) as f64);
        let lo = p.floor() as usize;
        (lo, (lo + 1).min(inn - 1), p - lo as f64)
    };
    let mut out = Vec::new();
    for bi in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                let (y0, y1, fy) = src(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1, fx) = src(ox, w, ow);
                    let v = x.at4(bi, ch, y0, x0) * (1.0 - fy) * (1.0 - fx)
                        + x.at4(bi, ch, y0, x1) * (1.0 - fy) * fx
                        + x.at4(bi, ch, y1, x0) * fy * (1.0 - fx)
                        + x.at4(bi, ch, y1, x1) * fy * fx;
                    out.push(v);
                }
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out).unwrap()
}

pub fn ref_batchnorm(x: &Tensor<f64>, p: &BatchNormParams<f64>) -> Tensor<f64> {
    let [_, c, h, w] = x.dims4();
    Tensor::from_fn(x.shape(), |i| {
        let ch = (i / (h * w)) % c;
        (x.data()[i] - p.mean[ch]) / (p.var[ch] + p.epsilon).sqrt() * p.gamma[ch] + p.beta[ch]
    })
}

pub fn ref_activation(x: &Tensor<f64>, kind: Activation) -> Tensor<f64> {
    x.map(|v| match kind {
        Activation::Relu => {
            if v > 0.0 {
                v
            } else {
                0.0
            }
        }
        Activation::Relu6 => v.clamp(0.0, 6.0),
        Activation::Linear => v,
    })
}

pub fn ref_concat(xs: &[&Tensor<f64>]) -> Tensor<f64> {
    let [n, _, h, w] = xs[0].dims4();
    let c: usize = xs.iter().map(|t| t.dims4()[1]).sum();
    let mut out = Vec::new();
    for bi in 0..n {
        for t in xs {
            for ch in 0..t.dims4()[1] {
                for y in 0..h {
                    for x in 0..w {
                        out.push(t.at4(bi, ch, y, x));
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], out).unwrap()
}

fn pick_padding(rng: &mut impl Rng) -> Padding {
    if rng.random_bool(0.5) {
        Padding::Same
    } else {
        Padding::Valid
    }
}

/// Runs `cases` randomized comparisons of every primitive against its
/// reference and returns the worst absolute error per primitive.
pub fn oracle_sweep(cases: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut worst = vec![
        ("conv2d", 0f64),
        ("depthwise_conv2d", 0.0),
        ("pointwise_conv2d", 0.0),
        ("transposed_conv2d", 0.0),
        ("bilinear_resize", 0.0),
        ("batchnorm", 0.0),
        ("fold_batchnorm", 0.0),
        ("activation", 0.0),
        ("add", 0.0),
        ("concat", 0.0),
        ("slice_channels", 0.0),
    ];
    let mut note = |i: usize, e: f64| worst[i].1 = worst[i].1.max(e);
    for _ in 0..cases {
        let n = r.random_range(1..=2);
        let cin = r.random_range(1..=5);
        let cout = r.random_range(1..=5);
        let k = r.random_range(1..=4);
        let s = r.random_range(1..=3);
        let h = r.random_range(k..=9);
        let w = r.random_range(k..=9);
        let pad = pick_padding(&mut r);
        let x = rand_tensor(&mut r, &[n, cin, h, w]);
        let kern = rand_tensor(&mut r, &[cout, cin, k, k]);
        let bias = rand_tensor(&mut r, &[cout]);
        let got = conv2d(&x, &kern, Some(&bias), s, pad).unwrap();
        note(0, got.max_abs_diff(&ref_conv2d(&x, &kern, Some(&bias), s, pad)));

        let dk = rand_tensor(&mut r, &[cin, 1, k, k]);
        let db = rand_tensor(&mut r, &[cin]);
        let got = depthwise_conv2d(&x, &dk, Some(&db), s, pad).unwrap();
        note(1, got.max_abs_diff(&ref_depthwise(&x, &dk, Some(&db), s, pad)));

        let pk = rand_tensor(&mut r, &[cout, cin, 1, 1]);
        let got = pointwise_conv2d(&x, &pk, Some(&bias)).unwrap();
        note(2, got.max_abs_diff(&ref_conv2d(&x, &pk, Some(&bias), 1, Padding::Valid)));

        let tk = rand_tensor(&mut r, &[cin, cout, k, k]);
        let got = transposed_conv2d_padded(&x, &tk, Some(&bias), s, pad).unwrap();
        note(3, got.max_abs_diff(&ref_transposed(&x, &tk, Some(&bias), s, pad)));

        let (oh, ow) = (r.random_range(1..=2 * h), r.random_range(1..=2 * w));
        note(4, bilinear_resize(&x, oh, ow).unwrap().max_abs_diff(&ref_bilinear(&x, oh, ow)));

        let bn = BatchNormParams {
            mean: (0..cout).map(|_| r.random_range(-1.0..1.0)).collect(),
            var: (0..cout).map(|_| r.random_range(0.1..2.0)).collect(),
            gamma: (0..cout).map(|_| r.random_range(-2.0..2.0)).collect(),
            beta: (0..cout).map(|_| r.random_range(-1.0..1.0)).collect(),
            epsilon: 1e-3,
        };
        let y = conv2d(&x, &kern, Some(&bias), s, pad).unwrap();
        note(5, batchnorm(&y, &bn).unwrap().max_abs_diff(&ref_batchnorm(&y, &bn)));
        let (fk, fb) = fold_batchnorm(&kern, Some(&bias), &bn, 0).unwrap();
        let folded = conv2d(&x, &fk, Some(&fb), s, pad).unwrap();
        note(6, folded.max_abs_diff(&ref_batchnorm(&ref_conv2d(&x, &kern, Some(&bias), s, pad), &bn)));

        let scaled = x.scale(8.0);
        for kind in [Activation::Relu, Activation::Relu6, Activation::Linear] {
            note(7, activation(&scaled, kind).max_abs_diff(&ref_activation(&scaled, kind)));
        }
        let x2 = rand_tensor(&mut r, &[n, cin, h, w]);
        let sum = add(&x, &x2).unwrap();
        let expect = Tensor::from_fn(x.shape(), |i| x.data()[i] + x2.data()[i]);
        note(8, sum.max_abs_diff(&expect));

        let c2 = r.random_range(1..=4);
        let x3 = rand_tensor(&mut r, &[n, c2, h, w]);
        note(9, concat(&[&x, &x3]).unwrap().max_abs_diff(&ref_concat(&[&x, &x3])));
        let start = r.random_range(0..cin);
        let len = r.random_range(1..=cin - start);
        let sl = slice_channels(&x, start, len).unwrap();
        let expect = Tensor::from_fn(&[n, len, h, w], |i| {
            let (bi, rest) = (i / (len * h * w), i % (len * h * w));
            x.data()[bi * cin * h * w + start * h * w + rest]
        });
        note(10, sl.max_abs_diff(&expect));
    }
    worst
}

/// Parameters of the three-layer toy network used for gradient checks.
pub struct Toy {
    pub params: Vec<Tensor<f64>>,
    pub input: Tensor<f64>,
    pub gt_h: Tensor<f64>,
    pub t_h: Tensor<f64>,
    pub gt_l: [Tensor<f64>; 3],
    pub t_l: [Tensor<f64>; 3],
    pub alpha: f64,
}

pub const TOY_JOINTS: usize = 2;

impl Toy {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let j = TOY_JOINTS;
        let params = vec![
            rand_tensor(&mut r, &[6, 3, 3, 3]),
            rand_tensor(&mut r, &[6]),
            Tensor::from_fn(&[6], |_| r.random_range(0.5..1.5)),
            rand_tensor(&mut r, &[6]),
            rand_tensor(&mut r, &[6, 1, 3, 3]),
            rand_tensor(&mut r, &[4 * j, 6, 1, 1]),
            rand_tensor(&mut r, &[4 * j]),
        ];
        let maps = |r: &mut ChaCha8Rng| rand_tensor(r, &[1, j, 4, 4]);
        let gt_h = Tensor::from_fn(&[1, j, 4, 4], |_| r.random_range(0.0..1.0));
        Toy {
            params,
            input: rand_tensor(&mut r, &[1, 3, 8, 8]),
            t_h: maps(&mut r),
            gt_l: [maps(&mut r), maps(&mut r), maps(&mut r)],
            t_l: [maps(&mut r), maps(&mut r), maps(&mut r)],
            gt_h,
            alpha: 0.5,
        }
    }

    /// Loss and, when requested, the gradient of every parameter.
    pub fn loss(&self, with_grad: bool) -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let p: Vec<Var> = self.params.iter().map(|t| tape.leaf(t.clone())).collect();
        let x = tape.leaf(self.input.clone());
        let y = tape.conv2d(x, p[0], Some(p[1]), 2, Padding::Same).unwrap();
        let mean = [0.1, -0.2, 0.0, 0.3, -0.1, 0.2];
        let var = [1.0, 0.5, 2.0, 1.5, 0.8, 1.2];
        let y = tape.batchnorm(y, p[2], p[3], &mean, &var, 1e-3).unwrap();
        let y = tape.activation(y, Activation::Relu6);
        let y = tape.depthwise_conv2d(y, p[4], None, 1, Padding::Same).unwrap();
        let y = tape.conv2d(y, p[5], Some(p[6]), 1, Padding::Valid).unwrap();
        let j = TOY_JOINTS;
        let h = tape.slice_channels(y, 0, j).unwrap();
        let mut total = tape
            .blended_norm(
                h,
                BlendedNorm {
                    ground_truth: self.gt_h.clone(),
                    teacher: self.t_h.clone(),
                    mask: None,
                    alpha: self.alpha,
                    scale: 1.0 / j as f64,
                    squared: false,
                },
            )
            .unwrap();
        for f in 0..3 {
            let l = tape.slice_channels(y, (f + 1) * j, j).unwrap();
            let term = tape
                .blended_norm(
                    l,
                    BlendedNorm {
                        ground_truth: self.gt_l[f].clone(),
                        teacher: self.t_l[f].clone(),
                        mask: Some(self.gt_h.clone()),
                        alpha: self.alpha,
                        scale: 1.0,
                        squared: false,
                    },
                )
                .unwrap();
            total = tape.add(total, term).unwrap();
        }
        let value = tape.value(total).data()[0];
        if !with_grad {
            return (value, Vec::new());
        }
        let g = tape.backward(total, &Tensor::scalar(1.0)).unwrap();
        (value, p.iter().map(|&v| g.get(v).unwrap().clone()).collect())
    }
}

/// Worst relative error between analytic and central-difference gradients
/// over `probes` random parameter entries.
pub fn toy_gradient_check(seed: u64, probes: usize) -> f64 {
    let toy = Toy::new(seed);
    let (_, grads) = toy.loss(true);
    let mut r = rng(seed ^ 0xfd);
    let h = 1e-6;
    let mut worst = 0f64;
    for _ in 0..probes {
        let t = r.random_range(0..toy.params.len());
        let i = r.random_range(0..toy.params[t].len());
        let mut probe = Toy { params: toy.params.clone(), ..Toy::new(seed) };
        probe.params[t].data_mut()[i] += h;
        let up = probe.loss(false).0;
        probe.params[t].data_mut()[i] -= 2.0 * h;
        let down = probe.loss(false).0;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[t].data()[i];
        let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

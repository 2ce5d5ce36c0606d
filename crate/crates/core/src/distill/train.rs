use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mpjpe, SupervisionSample};
use crate::decode::{decode_keypoints, decode_pose};
use crate::error::{Error, Result};
use crate::network::{is_statistic, Init, Network, NetworkSpec};
use crate::postprocess::ROOT;
use crate::tensor::tape::BlendedNorm;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Rmsprop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Weight of the ground-truth terms; the teacher terms get `1 − alpha`.
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    /// Seeds student initialisation and batch order.
    pub seed: u64,
    /// Use squared norms in both losses.
    pub squared_norm: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.5,
            learning_rate: 2.5e-4,
            batch_size: 4,
            optimizer: OptimizerKind::Adam,
            epochs: 20,
            seed: 0,
            squared_norm: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mpjpe_mm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub metrics: Vec<EpochMetrics>,
}

/// Teacher heatmaps and location maps for each training sample, computed once.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    /// `1 × J × h × w` per sample.
    pub heatmaps: Vec<Tensor<f64>>,
    /// X, Y, Z maps, each `1 × J × h × w`, per sample.
    pub locmaps: Vec<[Tensor<f64>; 3]>,
}

impl TeacherTargets {
    pub fn compute(teacher: &Network, samples: &[SupervisionSample]) -> Result<Self> {
        let mut heatmaps = Vec::with_capacity(samples.len());
        let mut locmaps = Vec::with_capacity(samples.len());
        for s in samples {
            let out = teacher.forward(&s.image())?;
            heatmaps.push(out.heatmaps.cast());
            locmaps.push([out.x.cast(), out.y.cast(), out.z.cast()]);
        }
        Ok(TeacherTargets { heatmaps, locmaps })
    }
}

/// Root-relative pose read from the network's own heatmaps.
pub fn predict_pose(net: &Network, image: &Tensor<f32>) -> Result<Vec<[f64; 3]>> {
    let out = net.forward(image)?;
    let stride = net.spec().output_stride;
    let kps = decode_keypoints(&out.heatmaps, stride)?;
    Ok(decode_pose(&out.x, &out.y, &out.z, &kps, stride, ROOT)?.0)
}

/// Mean MPJPE over `samples`.
pub fn evaluate_mpjpe(net: &Network, samples: &[SupervisionSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate_mpjpe", "no samples"));
    }
    let mut total = 0.0;
    for s in samples {
        total += mpjpe(&predict_pose(net, &s.image())?, &s.gt_pose)?;
    }
    Ok(total / samples.len() as f64)
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    /// First and second moments per parameter, in parameter order.
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const RHO: f64 = 0.9;
const OPT_EPSILON: f64 = 1e-7;

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, net: &Network) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            moments: net
                .params()
                .iter()
                .map(|(_, t)| (vec![0.0; t.len()], vec![0.0; t.len()]))
                .collect(),
        }
    }

    fn apply(&mut self, net: &mut Network, grads: &[Option<Tensor<f64>>]) {
        self.step += 1;
        let (c1, c2) = (1.0 - BETA1.powi(self.step), 1.0 - BETA2.powi(self.step));
        for (((_, p), g), (m, v)) in net.params_mut().iter_mut().zip(grads).zip(&mut self.moments) {
            let Some(g) = g else { continue };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                match self.kind {
                    OptimizerKind::Adam => {
                        *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                        *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                        *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + OPT_EPSILON);
                    }
                    OptimizerKind::Rmsprop => {
                        *vi = RHO * *vi + (1.0 - RHO) * gi * gi;
                        *w -= self.lr * gi / (vi.sqrt() + OPT_EPSILON);
                    }
                }
            }
        }
    }
}

fn stack_f64(ts: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
    Tensor::stack(ts)
}

/// Loss of one batch and the gradient of every trainable parameter, in
/// parameter order (`None` for frozen statistics).
pub(crate) fn batch_loss(
    net: &Network,
    batch: &[&SupervisionSample],
    teacher: Option<(&[&Tensor<f64>], &[&[Tensor<f64>; 3]])>,
    alpha: f64,
    squared: bool,
    with_grad: bool,
) -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
    let n = batch.len();
    let images: Vec<Tensor<f64>> = batch.iter().map(|s| s.image().cast()).collect();
    let image = Tensor::stack(&images.iter().collect::<Vec<_>>())?;
    let gt_h = stack_f64(&batch.iter().map(|s| &s.gt_heatmaps).collect::<Vec<_>>())?;
    let [_, j, h, w] = gt_h.dims4();
    let plane = j * h * w;

    let mut tape = Tape::new();
    let leaves = net.tape_leaves(&mut tape);
    let x = tape.leaf(image);
    let out = net.forward_tape(&mut tape, &leaves, x)?;

    let t_h = match teacher {
        Some((th, _)) => stack_f64(th)?,
        None => gt_h.clone(),
    };
    let hm = tape.blended_norm(
        out.heatmaps,
        BlendedNorm {
            ground_truth: gt_h.clone(),
            teacher: t_h,
            mask: None,
            alpha,
            scale: 1.0 / (j * n) as f64,
            squared,
        },
    )?;
    let mut total = hm;
    for (f, var) in [out.x, out.y, out.z].into_iter().enumerate() {
        let gt: Vec<f64> = batch
            .iter()
            .flat_map(|s| s.gt_locmaps.data()[f * plane..(f + 1) * plane].iter().copied())
            .collect();
        let gt = Tensor::new(&[n, j, h, w], gt)?;
        let teacher_maps = match teacher {
            Some((_, tl)) => stack_f64(&tl.iter().map(|t| &t[f]).collect::<Vec<_>>())?,
            None => gt.clone(),
        };
        let lm = tape.blended_norm(
            var,
            BlendedNorm {
                ground_truth: gt,
                teacher: teacher_maps,
                mask: Some(gt_h.clone()),
                alpha,
                scale: 1.0 / n as f64,
                squared,
            },
        )?;
        total = tape.add(total, lm)?;
    }
    let value = tape.value(total).data()[0];
    if !with_grad || !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let mut grads = tape.backward(total, &Tensor::scalar(1.0))?;
    let per_param = net
        .params()
        .iter()
        .map(|(name, _)| {
            if is_statistic(name) {
                None
            } else {
                leaves.get(name).and_then(|&v| grads.take(v))
            }
        })
        .collect();
    Ok((value, per_param))
}

/// Trains a fresh student from `student_spec`. Without a teacher the
/// teacher terms are dropped (`alpha` forced to 1).
pub fn train(
    student_spec: NetworkSpec,
    teacher: Option<&Network>,
    train_set: &[SupervisionSample],
    val_set: &[SupervisionSample],
    cfg: &DistillConfig,
) -> Result<TrainOutcome> {
    let targets = teacher.map(|t| TeacherTargets::compute(t, train_set)).transpose()?;
    let net = Network::build(student_spec, Init::Random(cfg.seed))?;
    train_network(net, targets.as_ref(), train_set, val_set, cfg)
}

/// Continues training `net` in place of a fresh build.
pub fn train_network(
    mut net: Network,
    teacher: Option<&TeacherTargets>,
    train_set: &[SupervisionSample],
    val_set: &[SupervisionSample],
    cfg: &DistillConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    if let Some(t) = teacher {
        if t.heatmaps.len() != train_set.len() {
            return Err(Error::invalid(
                "train",
                format!("{} teacher targets for {} samples", t.heatmaps.len(), train_set.len()),
            ));
        }
        let expect = train_set[0].gt_heatmaps.dims4()[1..].to_vec();
        if t.heatmaps[0].dims4()[1..] != expect[..] {
            return Err(Error::shape("train", t.heatmaps[0].shape(), train_set[0].gt_heatmaps.shape()));
        }
    }
    let alpha = if teacher.is_some() { cfg.alpha } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0bad_cafe);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &net);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&SupervisionSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let th: Vec<&Tensor<f64>>;
            let tl: Vec<&[Tensor<f64>; 3]>;
            let t = match teacher {
                Some(t) => {
                    th = idx.iter().map(|&i| &t.heatmaps[i]).collect();
                    tl = idx.iter().map(|&i| &t.locmaps[i]).collect();
                    Some((th.as_slice(), tl.as_slice()))
                }
                None => None,
            };
            let (loss, grads) = batch_loss(&net, &batch, t, alpha, cfg.squared_norm, true)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            opt.apply(&mut net, &grads);
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        let val = if val_set.is_empty() { f64::NAN } else { evaluate_mpjpe(&net, val_set)? };
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / batches as f64,
            val_mpjpe_mm: val,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainOutcome { network: net, metrics })
}

/// `epoch,train_loss,val_mpjpe_mm,wall_ms` rows.
pub fn write_metrics_csv(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,train_loss,val_mpjpe_mm,wall_ms\n");
    for m in metrics {
        out.push_str(&format!("{},{},{},{:.1}\n", m.epoch, m.train_loss, m.val_mpjpe_mm, m.wall_ms));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::{synth_dataset, SynthConfig};

    fn tiny() -> (NetworkSpec, Vec<SupervisionSample>) {
        (NetworkSpec::type_a().with_input_size(32), synth_dataset(3, 5, &SynthConfig::new(32)).unwrap())
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let (spec, data) = tiny();
        let cfg = DistillConfig { learning_rate: 0.0, epochs: 2, batch_size: 2, ..Default::default() };
        let out = train(spec.clone(), None, &data, &data[..1], &cfg).unwrap();
        let fresh = Network::build(spec, Init::Random(cfg.seed)).unwrap();
        assert_eq!(out.network.params(), fresh.params());
        assert_eq!(out.metrics.len(), 2);
    }

    #[test]
    fn small_step_descends() {
        let (spec, data) = tiny();
        let net = Network::build(spec, Init::Random(3)).unwrap();
        let batch = [&data[0]];
        let (before, _) = batch_loss(&net, &batch, None, 1.0, false, false).unwrap();
        let cfg = DistillConfig { learning_rate: 1e-5, epochs: 1, batch_size: 1, alpha: 1.0, ..Default::default() };
        let out = train_network(net, None, &data[..1], &[], &cfg).unwrap();
        let (after, _) = batch_loss(&out.network, &batch, None, 1.0, false, false).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let (spec, data) = tiny();
        let cfg = DistillConfig { epochs: 1, batch_size: 2, ..Default::default() };
        let a = train(spec.clone(), None, &data, &data[..1], &cfg).unwrap();
        let b = train(spec, None, &data, &data[..1], &cfg).unwrap();
        assert_eq!(a.network.params(), b.network.params());
        assert_eq!(a.metrics[0].train_loss, b.metrics[0].train_loss);
    }
}

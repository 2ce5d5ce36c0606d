//! Mimicry losses, ground-truth map synthesis, the synthetic stick-figure
//! dataset and the teacher-student trainer.

mod experiment;
mod synth;
mod train;

pub use experiment::{run_experiment, ExperimentConfig, ExperimentReport, SeedResult};
pub use synth::{
    load_dataset, project, render_sample, save_dataset, synth_dataset, synth_sequence, SequenceFrame, SupervisionSample,
    SynthConfig,
};
pub use train::{
    evaluate_mpjpe, predict_pose, train, train_network, write_metrics_csv, DistillConfig, EpochMetrics, OptimizerKind, TeacherTargets,
    TrainOutcome,
};

use crate::error::{Error, Result};
use crate::tensor::tape::BlendedNorm;
use crate::tensor::Tensor;

/// Heatmap width in map cells.
pub const HEATMAP_SIGMA: f64 = 2.0;

/// `(1/J) Σ_j [α‖H_j − H_j^GT‖ + (1 − α)‖H_j − H_j^T‖]` for `J × h × w`
/// maps. A leading batch axis is averaged over.
pub fn heatmap_loss(h: &Tensor<f64>, h_gt: &Tensor<f64>, h_t: &Tensor<f64>, alpha: f64, squared: bool) -> Result<f64> {
    let [n, j, _, _] = h.dims4();
    let loss = BlendedNorm {
        ground_truth: h_gt.clone(),
        teacher: h_t.clone(),
        mask: None,
        alpha,
        scale: 1.0 / (j * n) as f64,
        squared,
    };
    Ok(loss.evaluate(h, false)?.0)
}

/// `Σ_{X,Y,Z} Σ_j [α‖H_j^GT ⊙ (L_j − L_j^GT)‖ + (1 − α)‖H_j^GT ⊙ (L_j − L_j^T)‖]`
/// for `3 × J × h × w` location maps and a `J × h × w` mask.
pub fn locmap_loss(
    l: &Tensor<f64>,
    l_gt: &Tensor<f64>,
    l_t: &Tensor<f64>,
    h_gt: &Tensor<f64>,
    alpha: f64,
    squared: bool,
) -> Result<f64> {
    let [f, j, hh, ww] = l.dims4();
    if f != 3 || h_gt.dims4() != [1, j, hh, ww] {
        return Err(Error::shape("locmap_loss", l.shape(), h_gt.shape()));
    }
    if h_gt.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("locmap_loss", "mask must be non-negative"));
    }
    let mask: Vec<f64> = (0..3).flat_map(|_| h_gt.data().iter().copied()).collect();
    let loss = BlendedNorm {
        ground_truth: l_gt.clone(),
        teacher: l_t.clone(),
        mask: Some(Tensor::new(l.shape(), mask)?),
        alpha,
        scale: 1.0,
        squared,
    };
    Ok(loss.evaluate(l, false)?.0)
}

/// Unnormalized Gaussian bump around a crop-pixel keypoint on an `h × w`
/// map of the given stride, rescaled so its largest cell is exactly 1.
/// Keypoints outside the crop give a zero map and `false`.
pub fn make_gt_heatmap(keypoint: [f64; 2], h: usize, w: usize, stride: usize, sigma: f64) -> (Vec<f64>, bool) {
    let s = stride as f64;
    let [u, v] = keypoint;
    if !(u >= 0.0 && v >= 0.0 && u < w as f64 * s && v < h as f64 * s) {
        return (vec![0.0; h * w], false);
    }
    let (cx, cy) = (u / s - 0.5, v / s - 0.5);
    let mut map: Vec<f64> = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            (-((c - cx).powi(2) + (r - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let peak = map.iter().copied().fold(0.0, f64::max);
    map.iter_mut().for_each(|v| *v /= peak);
    (map, true)
}

/// `J × h × w` heatmaps and per-joint visibility.
pub fn make_gt_heatmaps(keypoints: &[[f64; 2]], h: usize, w: usize, stride: usize, sigma: f64) -> (Tensor<f64>, Vec<bool>) {
    let mut data = Vec::with_capacity(keypoints.len() * h * w);
    let mut vis = Vec::with_capacity(keypoints.len());
    for &k in keypoints {
        let (m, v) = make_gt_heatmap(k, h, w, stride, sigma);
        data.extend(m);
        vis.push(v);
    }
    (Tensor::new(&[keypoints.len(), h, w], data).expect("non-empty"), vis)
}

/// `3 × J × h × w` constant maps holding each joint's root-relative coordinate.
pub fn make_gt_locmaps(pose: &[[f64; 3]], h: usize, w: usize) -> Tensor<f64> {
    let j = pose.len();
    Tensor::from_fn(&[3, j, h, w], |i| {
        let plane = i / (h * w);
        pose[plane % j][plane / j]
    })
}

/// Mean Euclidean distance between corresponding joints.
pub fn mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid("mpjpe", format!("{} vs {} joints", pred.len(), gt.len())));
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt())
        .sum();
    Ok(total / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_heatmap_loss() {
        let h = Tensor::new(&[1, 1, 2], vec![1.0, 1.0]).unwrap();
        let gt = Tensor::zeros(&[1, 1, 2]);
        let t = h.clone();
        let l = heatmap_loss(&h, &gt, &t, 0.5, false).unwrap();
        assert!((l - 0.5 * 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_locmap_loss() {
        let l = Tensor::full(&[3, 1, 1, 1], 10.0);
        let gt = Tensor::full(&[3, 1, 1, 1], 7.0);
        let t = Tensor::full(&[3, 1, 1, 1], 6.0);
        let m = Tensor::full(&[1, 1, 1], 1.0);
        assert_eq!(locmap_loss(&l, &gt, &t, &m, 0.5, false).unwrap(), 3.0 * 3.5);
    }

    #[test]
    fn gaussian_peak_and_sigma() {
        let (m, vis) = make_gt_heatmap([4.0 * 8.0 + 4.0, 4.0 * 8.0 + 4.0], 10, 10, 8, 2.0);
        assert!(vis);
        assert_eq!(m[4 * 10 + 4], 1.0);
        assert!((m[4 * 10 + 6] - (-0.5f64).exp()).abs() < 1e-15);
        let (m, vis) = make_gt_heatmap([-1.0, 3.0], 10, 10, 8, 2.0);
        assert!(!vis && m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn locmaps_are_constant_per_joint() {
        let p = [[0.0, 0.0, 0.0], [100.0, -50.0, 30.0]];
        let l = make_gt_locmaps(&p, 2, 3);
        assert!(l.plane(0, 1).iter().all(|&v| v == 100.0));
        assert!(l.plane(1, 1).iter().all(|&v| v == -50.0));
        assert!(l.plane(2, 1).iter().all(|&v| v == 30.0));
        assert!(l.plane(2, 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mpjpe_offset() {
        let gt = vec![[1.0, 2.0, 3.0]; 15];
        let p: Vec<[f64; 3]> = gt.iter().map(|g| [g[0] + 10.0, g[1], g[2]]).collect();
        assert_eq!(mpjpe(&p, &gt).unwrap(), 10.0);
    }
}

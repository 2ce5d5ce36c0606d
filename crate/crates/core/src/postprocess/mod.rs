//! Temporal filtering, global root recovery and skeletal fitting of raw
//! per-frame poses.

mod filter;
mod ik;
mod skeleton;

use std::time::{Duration, Instant};

use glam::{DQuat, DVec3, DVec4};

pub use filter::{OneEuro, OneEuroBank, OneEuroParams};
pub use ik::{clamp_limits, clamp_rotation, ik_solve, swing_twist, IkSolution, JointLimit, JointLimits, SkeletonPose};
pub use skeleton::{Skeleton, JOINT_NAMES, ROOT};

use crate::decode::{decode_pose, CropTransform, Keypoint};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Root position in camera space (mm) from a root-relative pose and its 2D
/// keypoints in frame pixels.
///
/// With `P̄`, `K̄` the centroids over joints visible in `keypoints`,
/// `s = sqrt(Σ‖P_xy − P̄_xy‖²) / sqrt(Σ‖K − K̄‖²)` and the result is
/// `s·(K̄_x, K̄_y, f) − (P̄_x, P̄_y, 0)`, with `K` measured from the
/// principal point.
pub fn global_position(
    pose: &[[f64; 3]],
    keypoints: &[Keypoint],
    focal: f64,
    principal: [f64; 2],
) -> Result<[f64; 3]> {
    if pose.len() != keypoints.len() {
        return Err(Error::invalid(
            "global_position",
            format!("{} joints but {} keypoints", pose.len(), keypoints.len()),
        ));
    }
    let vis: Vec<usize> = (0..pose.len()).filter(|&j| keypoints[j].visible).collect();
    if vis.len() < 2 {
        return Err(Error::Degenerate(format!("{} visible joints", vis.len())));
    }
    let n = vis.len() as f64;
    let k: Vec<[f64; 2]> = vis
        .iter()
        .map(|&j| [keypoints[j].u - principal[0], keypoints[j].v - principal[1]])
        .collect();
    let p: Vec<[f64; 2]> = vis.iter().map(|&j| [pose[j][0], pose[j][1]]).collect();
    let centroid = |xs: &[[f64; 2]]| {
        let s = xs.iter().fold([0.0, 0.0], |a, x| [a[0] + x[0], a[1] + x[1]]);
        [s[0] / n, s[1] / n]
    };
    let spread = |xs: &[[f64; 2]], c: [f64; 2]| {
        xs.iter()
            .map(|x| (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let (kc, pc) = (centroid(&k), centroid(&p));
    let ks = spread(&k, kc);
    if !(ks > 0.0) {
        return Err(Error::Degenerate("zero 2D keypoint spread".into()));
    }
    let s = spread(&p, pc) / ks;
    Ok([s * kc[0] - pc[0], s * kc[1] - pc[1], s * focal])
}

/// Location maps of one frame with the crop they were predicted in.
#[derive(Clone, Debug)]
pub struct FrameMaps {
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
    pub z: Tensor<f32>,
    pub transform: CropTransform,
    pub stride: usize,
}

/// One frame of raw per-frame estimates.
#[derive(Clone, Debug)]
pub struct RawPoseFrame {
    pub t: f64,
    /// Frame pixels.
    pub keypoints: Vec<Keypoint>,
    /// Root-relative mm, used when `maps` is absent.
    pub pose3d: Vec<[f64; 3]>,
    /// When present the 3D pose is re-read at the filtered keypoints.
    pub maps: Option<FrameMaps>,
}

/// 1€ settings for root-relative joints in mm. Joint speeds run to hundreds
/// of mm/s, so the speed coefficient is larger than the pixel-scale default.
pub const JOINT_FILTER: OneEuroParams = OneEuroParams {
    min_cutoff: 1.0,
    beta: 0.1,
    d_cutoff: 1.0,
};

#[derive(Clone, Debug, PartialEq)]
pub struct StabilizerConfig {
    pub keypoints: OneEuroParams,
    pub joints: OneEuroParams,
    pub rotations: OneEuroParams,
    pub focal: f64,
    pub principal: [f64; 2],
    pub skeleton: Skeleton,
    pub limits: JointLimits,
}

impl StabilizerConfig {
    pub fn new(focal: f64, principal: [f64; 2]) -> Self {
        let skeleton = Skeleton::standard();
        StabilizerConfig {
            keypoints: OneEuroParams::default(),
            joints: JOINT_FILTER,
            rotations: OneEuroParams::default(),
            focal,
            principal,
            limits: JointLimits::standard(&skeleton),
            skeleton,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilizedFrame {
    pub t: f64,
    pub keypoints: Vec<Keypoint>,
    pub pose3d: Vec<[f64; 3]>,
    pub skeleton: SkeletonPose,
    /// Root position could not be recovered and repeats the last known one.
    pub root_lost: bool,
}

/// Streaming post-processing state for one video.
#[derive(Clone, Debug)]
pub struct Stabilizer {
    config: StabilizerConfig,
    keypoints: OneEuroBank,
    joints: OneEuroBank,
    rotations: OneEuroBank,
    last_root: [f64; 3],
    last_latency: Duration,
}

impl Stabilizer {
    pub fn new(config: StabilizerConfig) -> Result<Self> {
        for p in [config.keypoints, config.joints, config.rotations] {
            p.validate()?;
        }
        let j = config.skeleton.len();
        Ok(Stabilizer {
            keypoints: OneEuroBank::new(2 * j, config.keypoints),
            joints: OneEuroBank::new(3 * j, config.joints),
            rotations: OneEuroBank::new(4 * j, config.rotations),
            config,
            last_root: [0.0; 3],
            last_latency: Duration::ZERO,
        })
    }

    pub fn config(&self) -> &StabilizerConfig {
        &self.config
    }

    /// Processing time of the last [`Stabilizer::push`].
    pub fn last_latency(&self) -> Duration {
        self.last_latency
    }

    pub fn push(&mut self, frame: &RawPoseFrame) -> Result<StabilizedFrame> {
        let start = Instant::now();
        let j = self.config.skeleton.len();
        if frame.keypoints.len() != j || (frame.maps.is_none() && frame.pose3d.len() != j) {
            return Err(Error::invalid(
                "stabilize",
                format!("frame has {} keypoints and {} joints, skeleton has {j}", frame.keypoints.len(), frame.pose3d.len()),
            ));
        }

        let flat: Vec<f64> = frame.keypoints.iter().flat_map(|k| [k.u, k.v]).collect();
        let f = self.keypoints.step(&flat, frame.t)?;
        let keypoints: Vec<Keypoint> = frame
            .keypoints
            .iter()
            .enumerate()
            .map(|(i, k)| Keypoint {
                u: f[2 * i],
                v: f[2 * i + 1],
                ..*k
            })
            .collect();

        let raw3d = match &frame.maps {
            Some(m) => {
                let crop = m.transform.keypoints_to_crop(&keypoints);
                decode_pose(&m.x, &m.y, &m.z, &crop, m.stride, ROOT)?.0
            }
            None => frame.pose3d.clone(),
        };
        let flat: Vec<f64> = raw3d.iter().flatten().copied().collect();
        let f = self.joints.step(&flat, frame.t)?;
        let pose3d: Vec<[f64; 3]> = f.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();

        let (root, root_lost) = match global_position(&pose3d, &keypoints, self.config.focal, self.config.principal) {
            Ok(r) => (r, false),
            Err(Error::Degenerate(_)) => (self.last_root, true),
            Err(e) => return Err(e),
        };
        self.last_root = root;

        let positions: Vec<DVec3> = pose3d.iter().map(|p| DVec3::from_array(*p)).collect();
        let ik = ik_solve(&self.config.skeleton, &positions)?;
        let raw = SkeletonPose {
            rotations: ik.rotations,
            root: DVec3::from_array(root),
            t: frame.t,
        };
        let mut clamped = clamp_limits(&self.config.skeleton, &raw, &self.config.limits);

        if let Some(prev) = self.rotations.last() {
            for (i, q) in clamped.rotations.iter_mut().enumerate() {
                let p = DVec4::from_slice(&prev[4 * i..4 * i + 4]);
                if DVec4::from(*q).dot(p) < 0.0 {
                    *q = -*q;
                }
            }
        }
        let flat: Vec<f64> = clamped.rotations.iter().flat_map(|q| q.to_array()).collect();
        let f = self.rotations.step(&flat, frame.t)?;
        clamped.rotations = f
            .chunks_exact(4)
            .map(|c| {
                let v = DVec4::from_slice(c);
                v.try_normalize().map_or(DQuat::IDENTITY, DQuat::from_vec4)
            })
            .collect();

        self.last_latency = start.elapsed();
        Ok(StabilizedFrame {
            t: frame.t,
            keypoints,
            pose3d,
            skeleton: clamped,
            root_lost,
        })
    }
}

/// Random parent-relative rotations with each swing drawn uniformly up to
/// `fraction` of the joint's cone and each twist within `fraction` of its range.
pub fn random_pose<R: rand::Rng + ?Sized>(rng: &mut R, skeleton: &Skeleton, limits: &JointLimits, fraction: f64) -> Vec<DQuat> {
    (0..skeleton.len())
        .map(|j| {
            let axis = if skeleton.parent(j).is_none() { DVec3::NEG_Y } else { skeleton.rest_dir(j) };
            let lim = limits.get(j);
            let swing_axis = loop {
                let v = DVec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if let Some(a) = (v - axis * v.dot(axis)).try_normalize() {
                    break a;
                }
            };
            let swing = rng.random_range(0.0..=fraction * lim.cone_deg).to_radians();
            let twist = rng
                .random_range(fraction * lim.twist_min_deg..=fraction * lim.twist_max_deg)
                .to_radians();
            DQuat::from_axis_angle(swing_axis, swing) * DQuat::from_axis_angle(axis, twist)
        })
        .collect()
}

/// Runs a whole sequence through a fresh [`Stabilizer`].
pub fn stabilize_stream(frames: &[RawPoseFrame], config: StabilizerConfig) -> Result<Vec<StabilizedFrame>> {
    let mut s = Stabilizer::new(config)?;
    frames.iter().map(|f| s.push(f)).collect()
}

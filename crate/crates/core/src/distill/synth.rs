//! Procedural stick-figure scenes with exact supervision.

use std::path::Path;

use glam::{DQuat, DVec3};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{make_gt_heatmaps, make_gt_locmaps, HEATMAP_SIGMA};
use crate::error::{Error, Result};
use crate::network::spec::OUTPUT_STRIDE;
use crate::postprocess::{random_pose, JointLimits, Skeleton};
use crate::tensor::io::{self, StoredTensor};
use crate::tensor::Tensor;

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Crop side in pixels.
    pub input_size: usize,
    /// Focal length as a multiple of the crop side.
    pub focal_factor: f64,
    /// Fraction of each joint limit used when drawing poses.
    pub pose_range: f64,
    /// Random scaling of the figure relative to the crop.
    pub scale_range: (f64, f64),
    /// Random gamma applied to the rendered image.
    pub gamma_range: (f64, f64),
}

impl SynthConfig {
    pub fn new(input_size: usize) -> Self {
        SynthConfig {
            input_size,
            focal_factor: 1.2,
            pose_range: 0.5,
            scale_range: (0.7, 1.0),
            gamma_range: (0.7, 1.4),
        }
    }

    pub fn focal(&self) -> f64 {
        self.focal_factor * self.input_size as f64
    }

    pub fn map_size(&self) -> usize {
        self.input_size / OUTPUT_STRIDE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionSample {
    pub pixels: RgbImage,
    /// `J × h × w`.
    pub gt_heatmaps: Tensor<f64>,
    /// `3 × J × h × w`, mm.
    pub gt_locmaps: Tensor<f64>,
    /// Root-relative mm; the root row is zero.
    pub gt_pose: Vec<[f64; 3]>,
    /// Crop pixels.
    pub gt_keypoints: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    pub focal: f64,
    /// Camera-space position of the root, mm.
    pub translation: [f64; 3],
}

impl SupervisionSample {
    /// `1 × 3 × S × S` network input in [-1, 1].
    pub fn image(&self) -> Tensor<f32> {
        crate::network::normalize_rgb8(self.pixels.as_raw(), self.pixels.width() as usize, self.pixels.height() as usize)
            .expect("square RGB crop")
    }
}

/// Pinhole projection of camera-space points (mm) to pixels.
pub fn project(points: &[[f64; 3]], focal: f64, principal: [f64; 2]) -> Vec<[f64; 2]> {
    points
        .iter()
        .map(|p| [focal * p[0] / p[2] + principal[0], focal * p[1] / p[2] + principal[1]])
        .collect()
}

fn palette(i: usize, n: usize) -> [f64; 3] {
    let h = i as f64 / n as f64 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r * 230.0 + 20.0, g * 230.0 + 20.0, b * 230.0 + 20.0]
}

fn blend(img: &mut [f64], w: usize, x: usize, y: usize, color: [f64; 3], coverage: f64) {
    let i = (y * w + x) * 3;
    for c in 0..3 {
        img[i + c] += (color[c] - img[i + c]) * coverage;
    }
}

/// Anti-aliased capsule from `a` to `b` with the given radius.
fn stroke(img: &mut [f64], w: usize, h: usize, a: [f64; 2], b: [f64; 2], radius: f64, color: [f64; 3]) {
    let x0 = (a[0].min(b[0]) - radius - 1.0).floor().max(0.0) as usize;
    let x1 = ((a[0].max(b[0]) + radius + 1.0).ceil().max(0.0) as usize).min(w);
    let y0 = (a[1].min(b[1]) - radius - 1.0).floor().max(0.0) as usize;
    let y1 = ((a[1].max(b[1]) + radius + 1.0).ceil().max(0.0) as usize).min(h);
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let d = ((px - a[0] - t * dx).powi(2) + (py - a[1] - t * dy).powi(2)).sqrt();
            let cov = (radius + 0.5 - d).clamp(0.0, 1.0);
            if cov > 0.0 {
                blend(img, w, x, y, color, cov);
            }
        }
    }
}

/// Draws the figure over a random background. Bones are painted far to near.
pub fn render_sample<R: Rng + ?Sized>(
    rng: &mut R,
    skeleton: &Skeleton,
    camera_points: &[[f64; 3]],
    keypoints: &[[f64; 2]],
    focal: f64,
    width: usize,
    height: usize,
    gamma: f64,
) -> RgbImage {
    let top: [f64; 3] = std::array::from_fn(|_| rng.random_range(20.0..235.0));
    let bottom: [f64; 3] = std::array::from_fn(|_| rng.random_range(20.0..235.0));
    let noise = Normal::new(0.0, 6.0).expect("valid sigma");
    let mut img = vec![0.0f64; width * height * 3];
    for y in 0..height {
        let f = y as f64 / height.max(2) as f64;
        for x in 0..width {
            for c in 0..3 {
                img[(y * width + x) * 3 + c] = top[c] + (bottom[c] - top[c]) * f + noise.sample(rng);
            }
        }
    }

    let mut bones: Vec<usize> = (1..skeleton.len()).collect();
    let depth = |j: usize| {
        let p = skeleton.parent(j).expect("bone");
        camera_points[j][2] + camera_points[p][2]
    };
    bones.sort_by(|&a, &b| depth(b).total_cmp(&depth(a)));
    let n = skeleton.len();
    for j in bones {
        let p = skeleton.parent(j).expect("bone");
        let z = 0.5 * (camera_points[j][2] + camera_points[p][2]);
        let radius = (45.0 * focal / z).max(1.0);
        stroke(&mut img, width, height, keypoints[p], keypoints[j], radius, palette(j - 1, n - 1));
        if skeleton.names()[j] == "head" {
            let r = (90.0 * focal / camera_points[j][2]).max(1.5);
            stroke(&mut img, width, height, keypoints[j], keypoints[j], r, palette(j - 1, n - 1));
        }
    }

    let mut out = RgbImage::new(width as u32, height as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        *px = Rgb(std::array::from_fn(|c| {
            let v = (img[i * 3 + c] / 255.0).clamp(0.0, 1.0).powf(gamma);
            (v * 255.0).round() as u8
        }));
    }
    out
}

/// Root-relative joint positions for random rotations, with a random
/// whole-body yaw and small tilt.
fn random_body<R: Rng + ?Sized>(rng: &mut R, skeleton: &Skeleton, limits: &JointLimits, range: f64) -> Vec<DQuat> {
    let mut q = random_pose(rng, skeleton, limits, range);
    q[0] = DQuat::from_rotation_y(rng.random_range(-60f64..60.0).to_radians())
        * DQuat::from_rotation_x(rng.random_range(-10f64..10.0).to_radians())
        * DQuat::from_rotation_z(rng.random_range(-10f64..10.0).to_radians());
    q
}

/// Places a root-relative pose in front of a camera so that its projection
/// spans about `scale · 0.8` of `frame_extent`, centred on the principal point
/// up to `jitter` pixels.
fn place<R: Rng + ?Sized>(rng: &mut R, pose: &[DVec3], focal: f64, frame_extent: f64, scale: f64, jitter: f64) -> DVec3 {
    let (mut lo, mut hi) = (DVec3::splat(f64::INFINITY), DVec3::splat(f64::NEG_INFINITY));
    for p in pose {
        lo = lo.min(*p);
        hi = hi.max(*p);
    }
    let extent = (hi.x - lo.x).max(hi.y - lo.y);
    let depth = (focal * extent / (scale * 0.8 * frame_extent)).max(hi.z.abs().max(lo.z.abs()) + 500.0);
    let centre = (lo + hi) * 0.5;
    let jx = rng.random_range(-jitter..=jitter) * depth / focal;
    let jy = rng.random_range(-jitter..=jitter) * depth / focal;
    DVec3::new(-centre.x + jx, -centre.y + jy, depth)
}

fn sample_one(rng: &mut ChaCha8Rng, cfg: &SynthConfig, skeleton: &Skeleton, limits: &JointLimits) -> SupervisionSample {
    let s = cfg.input_size;
    let focal = cfg.focal();
    let rot = random_body(rng, skeleton, limits, cfg.pose_range);
    let pose = skeleton.forward_kinematics(&rot, DVec3::ZERO);
    let scale = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
    let t = place(rng, &pose, focal, s as f64, scale, 0.05 * s as f64);
    let cam: Vec<[f64; 3]> = pose.iter().map(|p| (*p + t).to_array()).collect();
    let principal = [s as f64 / 2.0, s as f64 / 2.0];
    let keypoints = project(&cam, focal, principal);
    let gamma = rng.random_range(cfg.gamma_range.0..=cfg.gamma_range.1);
    let pixels = render_sample(rng, skeleton, &cam, &keypoints, focal, s, s, gamma);
    let m = cfg.map_size();
    let gt_pose: Vec<[f64; 3]> = pose.iter().map(|p| p.to_array()).collect();
    let (gt_heatmaps, visible) = make_gt_heatmaps(&keypoints, m, m, OUTPUT_STRIDE, HEATMAP_SIGMA);
    SupervisionSample {
        pixels,
        gt_heatmaps,
        gt_locmaps: make_gt_locmaps(&gt_pose, m, m),
        gt_pose,
        gt_keypoints: keypoints,
        visible,
        focal,
        translation: t.to_array(),
    }
}

/// `n` samples; sample `i` draws from its own stream of the seeded
/// generator, so the set is reproducible and prefix-stable.
pub fn synth_dataset(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<SupervisionSample>> {
    if n == 0 {
        return Err(Error::invalid("synth_dataset", "n must be at least 1"));
    }
    if cfg.input_size == 0 || cfg.input_size % 16 != 0 {
        return Err(Error::invalid("synth_dataset", format!("input size {} is not a multiple of 16", cfg.input_size)));
    }
    let skeleton = Skeleton::standard();
    let limits = JointLimits::standard(&skeleton);
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            sample_one(&mut rng, cfg, &skeleton, &limits)
        })
        .collect())
}

/// One frame of a synthetic video.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFrame {
    pub t: f64,
    pub image: RgbImage,
    pub gt_pose: Vec<[f64; 3]>,
    /// Frame pixels.
    pub gt_keypoints: Vec<[f64; 2]>,
    pub translation: [f64; 3],
    pub focal: f64,
}

/// A smoothly moving figure: joint rotations slerp between random key poses
/// every second while the body drifts sideways. Frames are `width × height`
/// at 30 fps; the background is fixed per sequence.
pub fn synth_sequence(frames: usize, seed: u64, width: usize, height: usize, focal: f64) -> Vec<SequenceFrame> {
    const FPS: f64 = 30.0;
    const KEY_EVERY: usize = 30;
    let skeleton = Skeleton::standard();
    let limits = JointLimits::standard(&skeleton);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg_seed: u64 = rng.random();
    let keys: Vec<Vec<DQuat>> = (0..frames / KEY_EVERY + 2)
        .map(|_| random_body(&mut rng, &skeleton, &limits, 0.3))
        .collect();
    let first = skeleton.forward_kinematics(&keys[0], DVec3::ZERO);
    let base = place(&mut rng, &first, focal, height as f64, 0.75, 0.0);
    let drift = rng.random_range(-150.0..150.0);
    let principal = [width as f64 / 2.0, height as f64 / 2.0];
    (0..frames)
        .map(|i| {
            let (k, f) = (i / KEY_EVERY, (i % KEY_EVERY) as f64 / KEY_EVERY as f64);
            let rot: Vec<DQuat> = keys[k].iter().zip(&keys[k + 1]).map(|(a, b)| a.slerp(*b, f)).collect();
            let pose = skeleton.forward_kinematics(&rot, DVec3::ZERO);
            let t = i as f64 / FPS;
            let tr = base + DVec3::new(drift * (t * 0.5).sin(), 0.0, 0.0);
            let cam: Vec<[f64; 3]> = pose.iter().map(|p| (*p + tr).to_array()).collect();
            let kps = project(&cam, focal, principal);
            let mut bg = ChaCha8Rng::seed_from_u64(bg_seed);
            let image = render_sample(&mut bg, &skeleton, &cam, &kps, focal, width, height, 1.0);
            SequenceFrame {
                t,
                image,
                gt_pose: pose.iter().map(|p| p.to_array()).collect(),
                gt_keypoints: kps,
                translation: tr.to_array(),
                focal,
            }
        })
        .collect()
}

fn rows<const N: usize>(name: &str, rows: &[[f64; N]]) -> (String, StoredTensor) {
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    (name.into(), StoredTensor::Double(Tensor::new(&[rows.len(), N], data).expect("non-empty")))
}

/// Writes one container file per sample, `sample_00000.mvnw` onwards.
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[SupervisionSample]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let items = vec![
            ("image".to_string(), StoredTensor::Single(s.image())),
            ("gt_heatmaps".to_string(), StoredTensor::Double(s.gt_heatmaps.clone())),
            ("gt_locmaps".to_string(), StoredTensor::Double(s.gt_locmaps.clone())),
            rows("gt_pose", &s.gt_pose),
            rows("gt_keypoints", &s.gt_keypoints),
            (
                "visible".to_string(),
                StoredTensor::Double(Tensor::new(&[s.visible.len()], s.visible.iter().map(|&v| f64::from(u8::from(v))).collect())?),
            ),
            rows("camera", &[[s.focal, s.translation[0], s.translation[1], s.translation[2]]]),
        ];
        io::save(dir.join(format!("sample_{i:05}.mvnw")), &items)?;
    }
    Ok(())
}

fn field<'a>(items: &'a [(String, StoredTensor)], name: &str, path: &Path) -> Result<&'a StoredTensor> {
    items
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::WeightFormat(format!("{}: missing `{name}`", path.display())))
}

/// Reads a directory written by [`save_dataset`], in file-name order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SupervisionSample>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "mvnw"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|path| {
            let items = io::load(path)?;
            let image = field(&items, "image", path)?.to_f32();
            let [_, c, h, w] = image.dims4();
            if c != 3 {
                return Err(Error::WeightFormat(format!("{}: image is not RGB", path.display())));
            }
            let plane = h * w;
            let d = image.data();
            let pixels = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let i = y as usize * w + x as usize;
                Rgb(std::array::from_fn(|ch| ((d[ch * plane + i] as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8))
            });
            let pose = field(&items, "gt_pose", path)?.to_f64();
            let kps = field(&items, "gt_keypoints", path)?.to_f64();
            let cam = field(&items, "camera", path)?.to_f64();
            let cam = cam.data();
            if cam.len() != 4 {
                return Err(Error::WeightFormat(format!("{}: camera needs 4 values", path.display())));
            }
            Ok(SupervisionSample {
                pixels,
                gt_heatmaps: field(&items, "gt_heatmaps", path)?.to_f64(),
                gt_locmaps: field(&items, "gt_locmaps", path)?.to_f64(),
                gt_pose: pose.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
                gt_keypoints: kps.data().chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
                visible: field(&items, "visible", path)?.to_f64().data().iter().map(|&v| v != 0.0).collect(),
                focal: cam[0],
                translation: [cam[1], cam[2], cam[3]],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_root_centred() {
        let cfg = SynthConfig::new(64);
        let a = synth_dataset(3, 9, &cfg).unwrap();
        let b = synth_dataset(3, 9, &cfg).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert_eq!(s.gt_pose[0], [0.0; 3]);
            assert!(s.visible.iter().all(|&v| v));
        }
    }

    #[test]
    fn keypoints_reproject() {
        let cfg = SynthConfig::new(64);
        for s in synth_dataset(5, 2, &cfg).unwrap() {
            let cam: Vec<[f64; 3]> = s
                .gt_pose
                .iter()
                .map(|p| [p[0] + s.translation[0], p[1] + s.translation[1], p[2] + s.translation[2]])
                .collect();
            for (k, g) in project(&cam, s.focal, [32.0, 32.0]).iter().zip(&s.gt_keypoints) {
                assert!((k[0] - g[0]).abs() < 0.5 && (k[1] - g[1]).abs() < 0.5);
            }
        }
    }
}

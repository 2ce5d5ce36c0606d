//! Frame-by-frame inference: track, crop, forward, decode, stabilize.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use image::RgbImage;

use crate::decode::{crop_resize, decode_keypoints, CropScheduler};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::postprocess::{FrameMaps, RawPoseFrame, Stabilizer, StabilizerConfig};
use crate::stream::PoseRecord;

/// Accumulated wall time per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub crop: Duration,
    pub forward: Duration,
    pub decode: Duration,
    pub stabilize: Duration,
    pub total: Duration,
    pub frames: usize,
}

impl StageTimes {
    pub fn stage_sum(&self) -> Duration {
        self.crop + self.forward + self.decode + self.stabilize
    }

    pub fn summary(&self) -> String {
        let per = |d: Duration| d.as_secs_f64() * 1e3 / self.frames.max(1) as f64;
        format!(
            "{} frames, ms/frame: crop {:.2}, forward {:.2}, decode {:.2}, stabilize {:.2}, end-to-end {:.2}",
            self.frames,
            per(self.crop),
            per(self.forward),
            per(self.decode),
            per(self.stabilize),
            per(self.total)
        )
    }
}

pub struct Pipeline {
    network: Network,
    scheduler: CropScheduler,
    stabilizer: Option<Stabilizer>,
    focal: f64,
    frame: usize,
    times: StageTimes,
}

impl Pipeline {
    /// `focal` in frame pixels; the principal point is taken at the centre
    /// of the first frame.
    pub fn new(network: Network, focal: f64) -> Result<Self> {
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::Config(format!("focal length must be positive, got {focal}")));
        }
        Ok(Pipeline {
            network,
            scheduler: CropScheduler::new(),
            stabilizer: None,
            focal,
            frame: 0,
            times: StageTimes::default(),
        })
    }

    pub fn times(&self) -> &StageTimes {
        &self.times
    }

    pub fn process(&mut self, image: &RgbImage, t: f64) -> Result<PoseRecord> {
        let start = Instant::now();
        let spec = self.network.spec();
        let (size, stride) = (spec.input_size, spec.output_stride);
        let stabilizer = match &mut self.stabilizer {
            Some(s) => s,
            None => {
                let principal = [image.width() as f64 / 2.0, image.height() as f64 / 2.0];
                self.stabilizer.insert(Stabilizer::new(StabilizerConfig::new(self.focal, principal))?)
            }
        };

        let bbox = self.scheduler.next_box(image.width(), image.height());
        let (input, transform) = crop_resize(image, &bbox, size)?;
        let t_crop = Instant::now();

        let out = self.network.forward(&input)?;
        let t_forward = Instant::now();

        let kps = transform.keypoints_to_frame(&decode_keypoints(&out.heatmaps, stride)?);
        let tracked = self.scheduler.observe(&kps);
        let t_decode = Instant::now();

        let raw = RawPoseFrame {
            t,
            keypoints: kps,
            pose3d: Vec::new(),
            maps: Some(FrameMaps {
                x: out.x,
                y: out.y,
                z: out.z,
                transform,
                stride,
            }),
        };
        let s = stabilizer.push(&raw)?;
        let end = Instant::now();

        self.times.crop += t_crop - start;
        self.times.forward += t_forward - t_crop;
        self.times.decode += t_decode - t_forward;
        self.times.stabilize += end - t_decode;
        self.times.total += end - start;
        self.times.frames += 1;

        let record = PoseRecord {
            frame: self.frame,
            t,
            kp2d: s.keypoints.iter().map(|k| [k.u, k.v, k.confidence]).collect(),
            pose3d: s.pose3d,
            root: s.skeleton.root.to_array(),
            rot: s.skeleton.rotations.iter().map(|q| [q.w, q.x, q.y, q.z]).collect(),
            crop: transform.coeffs,
            lost: !tracked || s.root_lost,
        };
        self.frame += 1;
        Ok(record)
    }
}

/// A single image file, or every `.png` in a directory in name order.
pub fn input_frames(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Image(format!("{}: no .png frames", path.display())));
        }
        Ok(files)
    } else if path.is_file() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)))
    }
}

pub fn load_frame(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Runs every frame through a fresh pipeline, timestamping frame `i` at
/// `i / fps`.
pub fn infer_files(network: Network, frames: &[PathBuf], focal: f64, fps: f64) -> Result<(Vec<PoseRecord>, StageTimes)> {
    if !(fps > 0.0) {
        return Err(Error::Config(format!("fps must be positive, got {fps}")));
    }
    let mut p = Pipeline::new(network, focal)?;
    let mut out = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let img = load_frame(f)?;
        out.push(p.process(&img, i as f64 / fps)?);
    }
    Ok((out, p.times))
}

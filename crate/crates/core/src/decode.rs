//! Map decoding and the keypoint-driven crop tracker.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Box buffer added on top and bottom, as a fraction of the keypoint span height.
pub const VERTICAL_MARGIN: f64 = 0.2;
/// Box buffer added left and right, as a fraction of the keypoint span width.
pub const HORIZONTAL_MARGIN: f64 = 0.4;
pub const TRACK_MOMENTUM: f64 = 0.75;
/// Frames cropped from the whole image before tracking engages.
pub const BOOTSTRAP_FRAMES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
    /// Heatmap peak value, clamped at zero.
    pub confidence: f64,
    pub visible: bool,
}

/// Splits a `J × h × w` (or `1 × J × h × w`) tensor into its planes.
fn planes<T: Scalar>(op: &'static str, maps: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let [n, j, h, w] = maps.dims4();
    if n != 1 || maps.rank() < 3 {
        return Err(Error::invalid(op, format!("expected J×h×w maps, got {:?}", maps.shape())));
    }
    Ok((j, h, w))
}

/// Vertex of the parabola through three equally spaced samples, as an
/// offset from the middle one. Logs are used when all samples are positive,
/// which makes the fit exact for a Gaussian bump.
fn parabola_vertex(l: f64, m: f64, r: f64) -> Option<f64> {
    let (l, m, r) = if l > 0.0 && m > 0.0 && r > 0.0 { (l.ln(), m.ln(), r.ln()) } else { (l, m, r) };
    let denom = l - 2.0 * m + r;
    (denom < 0.0).then(|| 0.5 * (l - r) / denom)
}

/// Sub-cell position of a peak at index `i` of a line of `n` samples, kept
/// within half a cell of `i`. Peaks on the border use the nearest interior window.
fn refine(at: impl Fn(usize) -> f64, i: usize, n: usize) -> f64 {
    if n < 3 {
        return i as f64;
    }
    let c = i.clamp(1, n - 2);
    match parabola_vertex(at(c - 1), at(c), at(c + 1)) {
        Some(off) => (c as f64 + off).clamp(i as f64 - 0.5, i as f64 + 0.5),
        None => i as f64,
    }
}

/// Per-joint argmax with sub-cell refinement, in crop pixels.
pub fn decode_keypoints<T: Scalar>(heatmaps: &Tensor<T>, stride: usize) -> Result<Vec<Keypoint>> {
    let (j, h, w) = planes("decode_keypoints", heatmaps)?;
    let s = stride as f64;
    let mut out = Vec::with_capacity(j);
    for c in 0..j {
        let p = heatmaps.plane(0, c);
        let at = |r: usize, c: usize| p[r * w + c].as_f64();
        let mut best = 0;
        for i in 1..p.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        let (r, col) = (best / w, best % w);
        let peak = at(r, col);
        if p.iter().all(|v| v.as_f64() == 0.0) || !peak.is_finite() {
            out.push(Keypoint {
                u: w as f64 * s / 2.0,
                v: h as f64 * s / 2.0,
                confidence: 0.0,
                visible: false,
            });
            continue;
        }
        let x = refine(|k| at(r, k), col, w);
        let y = refine(|k| at(k, col), r, h);
        out.push(Keypoint {
            u: (x + 0.5) * s,
            v: (y + 0.5) * s,
            confidence: peak.max(0.0),
            visible: true,
        });
    }
    Ok(out)
}

/// Map cell under a crop-pixel position, clamped to the map.
pub fn cell_of(u: f64, v: f64, stride: usize, h: usize, w: usize) -> (usize, usize) {
    let s = stride as f64;
    let c = (u / s).floor().clamp(0.0, (w - 1) as f64) as usize;
    let r = (v / s).floor().clamp(0.0, (h - 1) as f64) as usize;
    (r, c)
}

/// Reads every joint's X/Y/Z at its keypoint cell and subtracts the root
/// reading. Invisible joints are set to the root (zero) and reported in
/// the returned mask as `false`.
pub fn decode_pose<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    z: &Tensor<T>,
    keypoints: &[Keypoint],
    stride: usize,
    root: usize,
) -> Result<(Vec<[f64; 3]>, Vec<bool>)> {
    let (j, h, w) = planes("decode_pose", x)?;
    if y.shape() != x.shape() || z.shape() != x.shape() {
        return Err(Error::shape("decode_pose", x.shape(), if y.shape() != x.shape() { y.shape() } else { z.shape() }));
    }
    if keypoints.len() != j || root >= j {
        return Err(Error::invalid(
            "decode_pose",
            format!("{} keypoints for {} joint maps (root {root})", keypoints.len(), j),
        ));
    }
    let read = |k: &Keypoint, joint: usize| {
        let (r, c) = cell_of(k.u, k.v, stride, h, w);
        let i = r * w + c;
        [x, y, z].map(|m| m.plane(0, joint)[i].as_f64())
    };
    let base = read(&keypoints[root], root);
    let mut pose = Vec::with_capacity(j);
    let mut ok = Vec::with_capacity(j);
    for (joint, k) in keypoints.iter().enumerate() {
        if joint == root {
            pose.push([0.0; 3]);
            ok.push(true);
        } else if k.visible {
            let v = read(k, joint);
            pose.push([v[0] - base[0], v[1] - base[1], v[2] - base[2]]);
            ok.push(true);
        } else {
            pose.push([0.0; 3]);
            ok.push(false);
        }
    }
    Ok((pose, ok))
}

/// Axis-aligned box in frame pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub fn full_frame(width: u32, height: u32) -> Self {
        BBox {
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width: width as f64,
            height: height as f64,
        }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            width: x1 - x0,
            height: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.width / 2.0,
            self.cy - self.height / 2.0,
            self.cx + self.width / 2.0,
            self.cy + self.height / 2.0,
        )
    }
}

/// Tight bounds of the visible keypoints grown by the tracking margins.
pub fn bbox_from_keypoints(keypoints: &[Keypoint]) -> Result<BBox> {
    let vis: Vec<&Keypoint> = keypoints.iter().filter(|k| k.visible).collect();
    if vis.len() < 2 {
        return Err(Error::TrackingLost(format!("{} visible keypoints", vis.len())));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for k in vis {
        x0 = x0.min(k.u);
        x1 = x1.max(k.u);
        y0 = y0.min(k.v);
        y1 = y1.max(k.v);
    }
    let (w, h) = (x1 - x0, y1 - y0);
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::TrackingLost(format!("degenerate keypoint span {w}×{h}")));
    }
    Ok(BBox::from_corners(
        x0 - HORIZONTAL_MARGIN * w,
        y0 - VERTICAL_MARGIN * h,
        x1 + HORIZONTAL_MARGIN * w,
        y1 + VERTICAL_MARGIN * h,
    ))
}

/// Exponentially smoothed box.
#[derive(Clone, Debug, PartialEq)]
pub struct Tracker {
    pub momentum: f64,
    current: Option<BBox>,
}

impl Default for Tracker {
    fn default() -> Self {
        Tracker::new(TRACK_MOMENTUM)
    }
}

impl Tracker {
    pub fn new(momentum: f64) -> Self {
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0, 1)");
        Tracker {
            momentum,
            current: None,
        }
    }

    pub fn current(&self) -> Option<BBox> {
        self.current
    }

    pub fn is_initialized(&self) -> bool {
        self.current.is_some()
    }

    pub fn reset(&mut self) {
        self.current = None;
    }

    pub fn track(&mut self, observed: BBox) -> BBox {
        let m = self.momentum;
        let next = match self.current {
            None => observed,
            Some(p) => {
                let ema = |prev: f64, obs: f64| prev + (1.0 - m) * (obs - prev);
                BBox {
                    cx: ema(p.cx, observed.cx),
                    cy: ema(p.cy, observed.cy),
                    width: ema(p.width, observed.width),
                    height: ema(p.height, observed.height),
                }
            }
        };
        self.current = Some(next);
        next
    }
}

/// Affine map from crop pixels to frame pixels, `[a, b, tx, c, d, ty]` with
/// `x = a·u + b·v + tx`, `y = c·u + d·v + ty`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    pub coeffs: [f64; 6],
}

impl CropTransform {
    pub fn identity() -> Self {
        CropTransform {
            coeffs: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        let [a, b, tx, c, d, ty] = self.coeffs;
        (a * u + b * v + tx, c * u + d * v + ty)
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        let [a, b, tx, c, d, ty] = self.coeffs;
        let det = a * d - b * c;
        let (px, py) = (x - tx, y - ty);
        ((d * px - b * py) / det, (a * py - c * px) / det)
    }

    pub fn keypoints_to_frame(&self, kps: &[Keypoint]) -> Vec<Keypoint> {
        kps.iter()
            .map(|k| {
                let (u, v) = self.to_frame(k.u, k.v);
                Keypoint { u, v, ..*k }
            })
            .collect()
    }

    pub fn keypoints_to_crop(&self, kps: &[Keypoint]) -> Vec<Keypoint> {
        kps.iter()
            .map(|k| {
                let (u, v) = self.to_crop(k.u, k.v);
                Keypoint { u, v, ..*k }
            })
            .collect()
    }
}

/// Square crop around `bbox` (side = longer box edge), edge-padded where it
/// leaves the frame and bilinearly resampled to `size × size`. Returns the
/// normalized network input and the crop-to-frame transform.
pub fn crop_resize(frame: &RgbImage, bbox: &BBox, size: usize) -> Result<(Tensor<f32>, CropTransform)> {
    let (fw, fh) = (frame.width() as f64, frame.height() as f64);
    let (x0, y0, x1, y1) = bbox.corners();
    if !(bbox.width > 0.0 && bbox.height > 0.0) || x1 <= 0.0 || y1 <= 0.0 || x0 >= fw || y0 >= fh {
        return Err(Error::invalid("crop_resize", format!("box {bbox:?} does not overlap the {fw}×{fh} frame")));
    }
    let side = bbox.width.max(bbox.height);
    let s = side / size as f64;
    let (ox, oy) = (bbox.cx - side / 2.0, bbox.cy - side / 2.0);
    let transform = CropTransform {
        coeffs: [s, 0.0, ox, 0.0, s, oy],
    };

    let (w, h) = (frame.width() as usize, frame.height() as usize);
    let raw = frame.as_raw();
    let px = |x: usize, y: usize, c: usize| raw[(y * w + x) * 3 + c] as f64;
    let tap = |p: f64, n: usize| {
        let p = p.clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(n - 1), p - i0 as f64)
    };
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for i in 0..size {
        let (ya, yb, wy) = tap(oy + (i as f64 + 0.5) * s - 0.5, h);
        for j in 0..size {
            let (xa, xb, wx) = tap(ox + (j as f64 + 0.5) * s - 0.5, w);
            for c in 0..3 {
                let top = px(xa, ya, c) * (1.0 - wx) + px(xb, ya, c) * wx;
                let bot = px(xa, yb, c) * (1.0 - wx) + px(xb, yb, c) * wx;
                let v = top * (1.0 - wy) + bot * wy;
                data[c * plane + i * size + j] = (v / 127.5 - 1.0) as f32;
            }
        }
    }
    Ok((Tensor::new(&[1, 3, size, size], data)?, transform))
}

/// Chooses the crop box for each frame: whole frame while bootstrapping,
/// then the smoothed box of the previous frame's keypoints.
#[derive(Clone, Debug, Default)]
pub struct CropScheduler {
    tracker: Tracker,
    frames_seen: usize,
    next: Option<BBox>,
}

impl CropScheduler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Box to crop the upcoming frame with.
    pub fn next_box(&self, frame_width: u32, frame_height: u32) -> BBox {
        match self.next {
            Some(b) if self.frames_seen >= BOOTSTRAP_FRAMES => b,
            _ => BBox::full_frame(frame_width, frame_height),
        }
    }

    /// Feeds back the frame-coordinate keypoints of the frame just processed.
    /// Returns `false` when tracking was lost; the scheduler then falls back
    /// to bootstrapping.
    pub fn observe(&mut self, keypoints: &[Keypoint]) -> bool {
        self.frames_seen += 1;
        match bbox_from_keypoints(keypoints) {
            Ok(b) => {
                self.next = Some(self.tracker.track(b));
                true
            }
            Err(_) => {
                self.tracker.reset();
                self.next = None;
                self.frames_seen = 0;
                false
            }
        }
    }
}

//! C ABI over the movnect runtime.
//!
//! Every function returns a [`MovnectStatus`]; on failure the message is
//! available from [`movnect_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use image::RgbImage;
use movnect::network::{Init, Network, NetworkSpec, Variant};
use movnect::pipeline::Pipeline;
use movnect::tensor::Tensor;
use movnect::Error;

/// Joints per pose.
pub const MOVNECT_JOINTS: usize = 15;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MovnectStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    WeightMismatch = 4,
    NumericFailure = 5,
    TrackingLost = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MovnectVariant {
    TypeA = 0,
    TypeB = 1,
    TypeC = 2,
}

/// Opaque network handle.
pub struct MovnectNetwork(Network);

/// Opaque streaming pipeline handle.
pub struct MovnectPipeline(Pipeline);

/// One processed frame. Arrays are sized for [`MOVNECT_JOINTS`] joints.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MovnectPose {
    pub frame: u64,
    pub t: f64,
    /// `u, v, confidence` per joint, frame pixels.
    pub kp2d: [f64; 45],
    /// Root-relative mm.
    pub pose3d: [f64; 45],
    /// Camera-space root, mm.
    pub root: [f64; 3],
    /// `w, x, y, z` per joint.
    pub rotations: [f64; 60],
    /// Crop-to-frame affine `a, b, tx, c, d, ty`.
    pub crop: [f64; 6],
    /// Non-zero when tracking or root recovery failed for this frame.
    pub lost: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MovnectStatus {
    match e {
        Error::Io { .. } | Error::Image(_) => MovnectStatus::Io,
        Error::WeightFormat(_) | Error::WeightMismatch { .. } => MovnectStatus::WeightMismatch,
        Error::NonFiniteLoss { .. } | Error::Degenerate(_) => MovnectStatus::NumericFailure,
        Error::TrackingLost(_) => MovnectStatus::TrackingLost,
        _ => MovnectStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (MovnectStatus, String)>) -> MovnectStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MovnectStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MovnectStatus::Panic
        }
    }
}

fn lift<T>(r: movnect::Result<T>) -> Result<T, (MovnectStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (MovnectStatus, String) {
    (MovnectStatus::NullPointer, format!("{what} is null"))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (MovnectStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn movnect_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a network with seeded random weights.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn movnect_network_build(
    variant: MovnectVariant,
    input_size: u32,
    seed: u64,
    out: *mut *mut MovnectNetwork,
) -> MovnectStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let v = match variant {
            MovnectVariant::TypeA => Variant::TypeA,
            MovnectVariant::TypeB => Variant::TypeB,
            MovnectVariant::TypeC => Variant::TypeC,
        };
        let net = lift(Network::build(
            NetworkSpec::preset(v).with_input_size(input_size as usize),
            Init::Random(seed),
        ))?;
        *out = Box::into_raw(Box::new(MovnectNetwork(net)));
        Ok(())
    })
}

/// Loads a weight file, detecting the variant from its contents.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn movnect_network_load(path: *const c_char, out: *mut *mut MovnectNetwork) -> MovnectStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (MovnectStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let net = lift(Network::load(path))?;
        *out = Box::into_raw(Box::new(MovnectNetwork(net)));
        Ok(())
    })
}

/// # Safety
/// `net` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn movnect_network_free(net: *mut MovnectNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Parameter count, MAC count per forward pass and output map side.
///
/// # Safety
/// `net` must be a live handle; output pointers may be null to skip them.
#[no_mangle]
pub unsafe extern "C" fn movnect_network_info(
    net: *const MovnectNetwork,
    params: *mut u64,
    macs: *mut u64,
    map_size: *mut u32,
) -> MovnectStatus {
    guard(|| {
        let net = &handle(net, "net")?.0;
        if let Some(p) = params.as_mut() {
            *p = net.count_params() as u64;
        }
        if let Some(m) = macs.as_mut() {
            *m = net.count_flops(net.spec().input_size).macs;
        }
        if let Some(s) = map_size.as_mut() {
            *s = net.spec().map_size() as u32;
        }
        Ok(())
    })
}

/// Runs one `3 × S × S` image in [-1, 1] (planar RGB) and writes the heatmaps
/// and X, Y, Z maps, each `J × m × m`, back to back into `maps` (`4·J·m·m`
/// floats).
///
/// # Safety
/// `input` must hold `input_len` floats and `maps` `maps_len` floats.
#[no_mangle]
pub unsafe extern "C" fn movnect_network_forward(
    net: *const MovnectNetwork,
    input: *const f32,
    input_len: usize,
    maps: *mut f32,
    maps_len: usize,
) -> MovnectStatus {
    guard(|| {
        let net = &handle(net, "net")?.0;
        if input.is_null() {
            return Err(null("input"));
        }
        if maps.is_null() {
            return Err(null("maps"));
        }
        let s = net.spec().input_size;
        if input_len != 3 * s * s {
            return Err((
                MovnectStatus::InvalidArgument,
                format!("input has {input_len} values, expected {}", 3 * s * s),
            ));
        }
        let m = net.spec().map_size();
        let need = 4 * net.spec().joint_count * m * m;
        if maps_len < need {
            return Err((MovnectStatus::BufferTooSmall, format!("maps needs {need} floats, got {maps_len}")));
        }
        let x = lift(Tensor::new(&[1, 3, s, s], std::slice::from_raw_parts(input, input_len).to_vec()))?;
        let out = lift(net.forward(&x))?;
        let dst = std::slice::from_raw_parts_mut(maps, need);
        for (chunk, t) in dst.chunks_mut(need / 4).zip([&out.heatmaps, &out.x, &out.y, &out.z]) {
            chunk.copy_from_slice(t.data());
        }
        Ok(())
    })
}

/// Creates a streaming pipeline over a copy of `net`.
///
/// # Safety
/// `net` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn movnect_pipeline_new(
    net: *const MovnectNetwork,
    focal: f64,
    out: *mut *mut MovnectPipeline,
) -> MovnectStatus {
    guard(|| {
        let net = &handle(net, "net")?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if net.spec().joint_count != MOVNECT_JOINTS {
            return Err((
                MovnectStatus::InvalidArgument,
                format!("pipeline needs {MOVNECT_JOINTS} joints, network has {}", net.spec().joint_count),
            ));
        }
        let p = lift(Pipeline::new(net.clone(), focal))?;
        *out = Box::into_raw(Box::new(MovnectPipeline(p)));
        Ok(())
    })
}

/// # Safety
/// `p` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn movnect_pipeline_free(p: *mut MovnectPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Processes one interleaved RGB8 frame taken at time `t` seconds.
///
/// # Safety
/// `rgb` must hold `width·height·3` bytes and `out` be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn movnect_pipeline_process(
    p: *mut MovnectPipeline,
    rgb: *const u8,
    width: u32,
    height: u32,
    t: f64,
    out: *mut MovnectPose,
) -> MovnectStatus {
    guard(|| {
        let p = &mut p.as_mut().ok_or_else(|| null("pipeline"))?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        let len = width as usize * height as usize * 3;
        let img = RgbImage::from_raw(width, height, std::slice::from_raw_parts(rgb, len).to_vec())
            .ok_or_else(|| (MovnectStatus::InvalidArgument, "bad frame size".to_string()))?;
        let r = lift(p.process(&img, t))?;
        let mut pose = MovnectPose {
            frame: r.frame as u64,
            t: r.t,
            kp2d: [0.0; 45],
            pose3d: [0.0; 45],
            root: r.root,
            rotations: [0.0; 60],
            crop: r.crop,
            lost: r.lost as u8,
        };
        pose.kp2d.copy_from_slice(r.kp2d.as_flattened());
        pose.pose3d.copy_from_slice(r.pose3d.as_flattened());
        pose.rotations.copy_from_slice(r.rot.as_flattened());
        ptr::write(out, pose);
        Ok(())
    })
}

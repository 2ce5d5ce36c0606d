use std::ffi::{CStr, CString};
use std::ptr;

use movnect_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(movnect_last_error()) }.to_string_lossy().into_owned()
}

fn build(size: u32) -> *mut MovnectNetwork {
    let mut net = ptr::null_mut();
    let st = unsafe { movnect_network_build(MovnectVariant::TypeA, size, 7, &mut net) };
    assert_eq!(st, MovnectStatus::Ok, "{}", last_error());
    net
}

#[test]
fn header_lists_every_entry_point() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/movnect.h")).unwrap();
    for f in [
        "movnect_last_error",
        "movnect_network_build",
        "movnect_network_load",
        "movnect_network_free",
        "movnect_network_info",
        "movnect_network_forward",
        "movnect_pipeline_new",
        "movnect_pipeline_process",
        "movnect_pipeline_free",
        "typedef struct MovnectNetwork MovnectNetwork",
        "MOVNECT_STATUS_NULL_POINTER",
    ] {
        assert!(h.contains(f), "header lacks {f}");
    }
}

#[test]
fn null_arguments_are_reported() {
    let st = unsafe { movnect_network_build(MovnectVariant::TypeA, 64, 0, ptr::null_mut()) };
    assert_eq!(st, MovnectStatus::NullPointer);
    assert!(last_error().contains("out"));
    let st = unsafe { movnect_network_info(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, MovnectStatus::NullPointer);
    unsafe { movnect_network_free(ptr::null_mut()) };
    unsafe { movnect_pipeline_free(ptr::null_mut()) };
}

#[test]
fn bad_input_size_and_missing_file() {
    let mut net = ptr::null_mut();
    let st = unsafe { movnect_network_build(MovnectVariant::TypeC, 50, 0, &mut net) };
    assert_eq!(st, MovnectStatus::InvalidArgument);
    assert!(net.is_null());
    let path = CString::new("/definitely/not/here.mvnw").unwrap();
    let st = unsafe { movnect_network_load(path.as_ptr(), &mut net) };
    assert_eq!(st, MovnectStatus::Io);
    assert!(last_error().contains("not/here"));
}

#[test]
fn info_and_forward() {
    let net = build(64);
    let (mut params, mut macs, mut m) = (0u64, 0u64, 0u32);
    assert_eq!(unsafe { movnect_network_info(net, &mut params, &mut macs, &mut m) }, MovnectStatus::Ok);
    assert!(params > 1_000_000 && macs > 0);
    assert_eq!(m, 8);
    let input = vec![0.25f32; 3 * 64 * 64];
    let mut maps = vec![f32::NAN; 4 * 15 * 8 * 8];
    assert_eq!(
        unsafe { movnect_network_forward(net, input.as_ptr(), input.len(), maps.as_mut_ptr(), maps.len() - 1) },
        MovnectStatus::BufferTooSmall
    );
    assert_eq!(
        unsafe { movnect_network_forward(net, input.as_ptr(), input.len(), maps.as_mut_ptr(), maps.len()) },
        MovnectStatus::Ok
    );
    assert!(maps.iter().all(|v| v.is_finite()));
    assert_eq!(last_error(), "");
    unsafe { movnect_network_free(net) };
}

#[test]
fn pipeline_processes_frames() {
    let net = build(64);
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { movnect_pipeline_new(net, 500.0, &mut p) }, MovnectStatus::Ok);
    unsafe { movnect_network_free(net) };
    let (w, h) = (96u32, 80u32);
    let rgb: Vec<u8> = (0..w * h * 3).map(|i| (i % 251) as u8).collect();
    let mut pose = std::mem::MaybeUninit::<MovnectPose>::uninit();
    for i in 0..3 {
        let st = unsafe { movnect_pipeline_process(p, rgb.as_ptr(), w, h, i as f64 / 30.0, pose.as_mut_ptr()) };
        assert_eq!(st, MovnectStatus::Ok, "{}", last_error());
        let pose = unsafe { pose.assume_init_ref() };
        assert_eq!(pose.frame, i);
        for q in pose.rotations.chunks(4) {
            let n: f64 = q.iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }
    unsafe { movnect_pipeline_free(p) };
}

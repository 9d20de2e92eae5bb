use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use vdrive_ffi::*;

fn last_error() -> String {
    let p = vd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn scene(seed: u64) -> *mut VdScene {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { vd_scene_generate(seed, &mut s) }, VdStatus::Ok);
    assert!(!s.is_null());
    s
}

#[test]
fn scene_reward_and_metrics_match_the_library() {
    let s = scene(7);
    let mut len = 0;
    assert_eq!(
        unsafe { vd_scene_trajectory(s, ptr::null_mut(), 0, &mut len) },
        VdStatus::BufferTooSmall
    );
    let mut xy = vec![0.0; 2 * len];
    assert_eq!(unsafe { vd_scene_trajectory(s, xy.as_mut_ptr(), len, &mut len) }, VdStatus::Ok);

    let native = vdrive::scene::generate_scene(7, &Default::default()).unwrap();
    let flat: Vec<f64> = native.trajectory.iter().flatten().copied().collect();
    assert_eq!(xy, flat);

    let mut rec = VdRewardRecord::default();
    assert_eq!(unsafe { vd_reward_score(s, xy.as_ptr(), len, ptr::null(), &mut rec) }, VdStatus::Ok);
    let want = vdrive::reward::score(&native, &native.trajectory, &Default::default()).unwrap();
    assert_eq!((rec.p_off, rec.r), (want.p_off, want.r));

    let bad = VdRewardWeights {
        alpha: -1.0,
        ..vd_reward_default_weights()
    };
    assert_eq!(unsafe { vd_reward_score(s, xy.as_ptr(), len, &bad, &mut rec) }, VdStatus::Invalid);
    assert!(last_error().contains("alpha"));

    let shifted: Vec<f64> = xy.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { 3.0 } else { 4.0 }).collect();
    let buckets = [3usize, 5, 8];
    let mut means = [0.0; 3];
    let st = unsafe { vd_l2_metric(shifted.as_ptr(), xy.as_ptr(), len, buckets.as_ptr(), 3, means.as_mut_ptr()) };
    assert_eq!(st, VdStatus::Ok);
    for m in means {
        assert!((m - 5.0).abs() < 1e-12);
    }

    let mut n_rects = 0;
    unsafe { vd_scene_obstacles(s, ptr::null_mut(), 0, &mut n_rects) };
    let mut rects = vec![0i64; 4 * n_rects];
    assert_eq!(unsafe { vd_scene_obstacles(s, rects.as_mut_ptr(), n_rects, &mut n_rects) }, VdStatus::Ok);
    let mut hit = true;
    let st = unsafe { vd_trajectory_collides(xy.as_ptr(), len, rects.as_ptr(), n_rects, 3.0, 4.0, &mut hit) };
    assert_eq!(st, VdStatus::Ok);
    let fp = vdrive::eval::Footprint { width: 3.0, height: 4.0 };
    assert_eq!(hit, vdrive::eval::trajectory_collides(&native.trajectory, &native.obstacles, fp));
    unsafe { vd_scene_free(s) };
}

#[test]
fn null_and_shape_errors_are_reported() {
    assert_eq!(unsafe { vd_scene_generate(1, ptr::null_mut()) }, VdStatus::NullPointer);
    assert!(last_error().contains("out_scene"));
    let p = [0.0; 4];
    let st = unsafe { vd_l2_metric(p.as_ptr(), p.as_ptr(), 2, [3usize].as_ptr(), 1, [0.0].as_mut_ptr()) };
    assert_eq!(st, VdStatus::Invalid);
    let mut t = ptr::null_mut();
    let st = unsafe { vd_tensor_new([2usize, 3].as_ptr(), 2, [0.0f32; 5].as_ptr(), 5, &mut t) };
    assert_eq!(st, VdStatus::Shape);
    assert!(t.is_null());
    unsafe {
        vd_scene_free(ptr::null_mut());
        vd_tensor_free(ptr::null_mut());
    }
}

#[test]
fn tensor_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("t.vdtn").to_str().unwrap()).unwrap();
    let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
    let mut t = ptr::null_mut();
    assert_eq!(
        unsafe { vd_tensor_new([2usize, 3, 4].as_ptr(), 3, data.as_ptr(), 24, &mut t) },
        VdStatus::Ok
    );
    assert_eq!(unsafe { vd_tensor_write(t, path.as_ptr()) }, VdStatus::Ok);
    let mut u = ptr::null_mut();
    assert_eq!(unsafe { vd_tensor_read(path.as_ptr(), &mut u) }, VdStatus::Ok);
    unsafe {
        assert_eq!(vd_tensor_rank(u), 3);
        assert_eq!(std::slice::from_raw_parts(vd_tensor_dims(u), 3), &[2, 3, 4]);
        assert_eq!(std::slice::from_raw_parts(vd_tensor_data(u), vd_tensor_len(u)), &data[..]);
        vd_tensor_free(t);
        vd_tensor_free(u);
    }
    let missing = CString::new(dir.path().join("none.vdtn").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { vd_tensor_read(missing.as_ptr(), &mut u) }, VdStatus::Io);
}

fn which(tool: &str) -> bool {
    Command::new(tool).arg("--version").output().is_ok_and(|o| o.status.success())
}

/// Compiles a C program against the generated header and the static
/// library, then runs it.
#[test]
fn c_program_links_against_header() {
    if !which("cc") {
        eprintln!("cc not found; skipping");
        return;
    }
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // tests run from target/<profile>/deps
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libvdrive_ffi.a");
    if !lib.is_file() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "vdrive.h"
int main(void) {
    VdScene *s = NULL;
    if (vd_scene_generate(3, &s) != VD_STATUS_OK) return 1;
    size_t n = 0;
    if (vd_scene_trajectory(s, NULL, 0, &n) != VD_STATUS_BUFFER_TOO_SMALL) return 2;
    double xy[64];
    if (n > 32 || vd_scene_trajectory(s, xy, 32, &n) != VD_STATUS_OK) return 3;
    VdRewardRecord rec;
    if (vd_reward_score(s, xy, n, NULL, &rec) != VD_STATUS_OK) return 4;
    vd_scene_free(s);
    if (vd_scene_generate(0, NULL) != VD_STATUS_NULL_POINTER || vd_last_error() == NULL) return 5;
    printf("%.6f\n", rec.r);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status);
    let r: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    let native = vdrive::scene::generate_scene(3, &Default::default()).unwrap();
    let want = vdrive::reward::score(&native, &native.trajectory, &Default::default()).unwrap().r;
    assert!((r - want).abs() < 1e-6);
}

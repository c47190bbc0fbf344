use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use unimamba_ffi::*;

fn last_error() -> String {
    let p = um_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn tensor_serialize_and_free() {
    let coords: [u32; 9] = [1, 0, 0, 0, 1, 0, 0, 0, 0];
    let feats = [1.0f32, 2.0, 3.0];
    let grid = [4u32, 4, 4];
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(
            um_tensor_new(coords.as_ptr(), feats.as_ptr(), 3, 1, grid.as_ptr(), &mut t),
            UmStatus::Ok
        );
        assert_eq!(um_tensor_len(t), 3);
        assert_eq!(um_tensor_channels(t), 1);
        let mut perm = [9usize; 3];
        assert_eq!(
            um_serialize(t, UmCurve::ZOrderX, perm.as_mut_ptr(), 3),
            UmStatus::Ok
        );
        // codes: (0,0,0) -> 0, (1,0,0) -> 1, (0,1,0) -> 2
        assert_eq!(perm, [2, 0, 1]);
        assert_eq!(
            um_serialize(t, UmCurve::ZOrderY, perm.as_mut_ptr(), 3),
            UmStatus::Ok
        );
        assert_eq!(perm, [2, 1, 0]);
        assert_eq!(
            um_serialize(t, UmCurve::Hilbert, perm.as_mut_ptr(), 2),
            UmStatus::InvalidArgument
        );
        assert!(last_error().contains("capacity"));
        um_tensor_free(t);
        um_tensor_free(ptr::null_mut());
    }
}

#[test]
fn errors_are_reported() {
    let coords: [u32; 6] = [0, 0, 0, 0, 0, 0];
    let grid = [4u32, 4, 4];
    let mut t = ptr::null_mut();
    unsafe {
        let s = um_tensor_new(coords.as_ptr(), ptr::null(), 2, 0, grid.as_ptr(), &mut t);
        assert_eq!(s, UmStatus::InvalidArgument);
        assert!(last_error().contains("duplicate"));
        assert!(t.is_null());
        assert_eq!(
            um_tensor_new(ptr::null(), ptr::null(), 1, 0, grid.as_ptr(), &mut t),
            UmStatus::NullPointer
        );
        let missing = CString::new("/nonexistent/x.svt").unwrap();
        assert_eq!(um_tensor_read(missing.as_ptr(), &mut t), UmStatus::Io);

        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.cfg");
        std::fs::write(&cfg, "strides = 1,0\n").unwrap();
        let cfg = CString::new(cfg.to_str().unwrap()).unwrap();
        let mut b = ptr::null_mut();
        assert_eq!(
            um_backbone_from_config(cfg.as_ptr(), &mut b),
            UmStatus::Config
        );
        assert!(last_error().contains("strides"));
        assert_eq!(um_backbone_channels(ptr::null()), 0);
    }
}

#[test]
fn forward_through_small_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, "channels = 4\nstrides = 1,2\nd_state = 4\n").unwrap();
    let cfg = CString::new(cfg.to_str().unwrap()).unwrap();
    let coords: Vec<u32> = (0..20u32).flat_map(|i| [i % 5, i / 5, i % 3]).collect();
    let feats: Vec<f32> = (0..80).map(|i| (i as f32 * 0.37).sin()).collect();
    let grid = [8u32, 8, 4];
    unsafe {
        let mut b = ptr::null_mut();
        assert_eq!(um_backbone_from_config(cfg.as_ptr(), &mut b), UmStatus::Ok);
        assert_eq!(um_backbone_channels(b), 4);
        let mut t = ptr::null_mut();
        assert_eq!(
            um_tensor_new(
                coords.as_ptr(),
                feats.as_ptr(),
                20,
                4,
                grid.as_ptr(),
                &mut t
            ),
            UmStatus::Ok
        );
        let mut bev = ptr::null_mut();
        assert_eq!(um_backbone_forward(b, t, &mut bev), UmStatus::Ok);
        let mut shape = [0usize; 3];
        assert_eq!(um_bev_shape(bev, shape.as_mut_ptr()), UmStatus::Ok);
        assert_eq!(shape, [8, 8, 4]);
        let data = std::slice::from_raw_parts(um_bev_data(bev), 8 * 8 * 4);
        assert!(data.iter().all(|v| v.is_finite()));
        assert!(data.iter().any(|&v| v != 0.0));
        um_bev_free(bev);
        um_tensor_free(t);
        um_backbone_free(b);
    }
}

fn deps_dir() -> PathBuf {
    // cargo refreshes the copy in deps/ on every test build, the uplifted one only on `cargo build`
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler, skipping");
        return;
    }
    let lib = deps_dir().join("libunimamba_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built, skipping", lib.display());
        return;
    }
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "unimamba.h"

int main(void) {
    uint32_t coords[6] = {0, 0, 0, 1, 1, 1};
    float feats[2] = {0.5f, -0.5f};
    uint32_t grid[3] = {2, 2, 2};
    UmTensor *t = NULL;
    if (um_tensor_new(coords, feats, 2, 1, grid, &t) != UM_STATUS_OK) return 1;
    size_t perm[2];
    if (um_serialize(t, UM_CURVE_HILBERT, perm, 2) != UM_STATUS_OK) return 2;
    if (um_serialize(NULL, UM_CURVE_HILBERT, perm, 2) != UM_STATUS_NULL_POINTER) return 3;
    printf("%zu %zu %s\n", perm[0], perm[1], um_last_error());
    um_tensor_free(t);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{out:?}");
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("0 1 "), "{text}");
    assert!(text.contains("null"));
}

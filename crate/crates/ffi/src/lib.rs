//! C ABI over the voxel backbone.
//!
//! Every fallible call returns a [`UmStatus`]; on failure a message is kept
//! per thread and can be read with [`um_last_error`]. Handles are opaque and
//! must be released with their matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use unimamba::container::read_voxel_tensor;
use unimamba::{
    backbone_forward, make_order, BackboneConfig, BackboneParams, BevMap, Curve, Error, Matrix,
    SparseVoxelTensor,
};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UmCurve {
    ZOrderX = 0,
    ZOrderY = 1,
    Hilbert = 2,
}

pub struct UmTensor(SparseVoxelTensor);

pub struct UmBackbone(BackboneParams);

pub struct UmBev(BevMap);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Fail(UmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io(_) => UmStatus::Io,
            Error::Format { .. } => UmStatus::Format,
            Error::Config { .. } => UmStatus::Config,
            _ => UmStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(UmStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> UmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UmStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            UmStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(UmStatus::InvalidArgument, format!("`{what}` is not UTF-8")))?;
    Ok(Path::new(s))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn um_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Builds a tensor from `n` coordinates (`3n` values, x y z) and row-major
/// features (`n * channels` values).
///
/// # Safety
/// `coords` and `features` must point to the stated number of elements
/// (`features` may be null when `n * channels == 0`), `grid` to three values,
/// and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn um_tensor_new(
    coords: *const u32,
    features: *const f32,
    n: usize,
    channels: usize,
    grid: *const u32,
    out: *mut *mut UmTensor,
) -> UmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if grid.is_null() {
            return Err(null("grid"));
        }
        if n > 0 && coords.is_null() {
            return Err(null("coords"));
        }
        let len = n
            .checked_mul(channels)
            .ok_or_else(|| Fail(UmStatus::InvalidArgument, "feature count overflows".into()))?;
        if len > 0 && features.is_null() {
            return Err(null("features"));
        }
        let grid = [*grid, *grid.add(1), *grid.add(2)];
        let flat = if n == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(coords, 3 * n)
        };
        let coords = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let data = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(features, len).to_vec()
        };
        let t = SparseVoxelTensor::new(coords, Matrix::from_vec(n, channels, data), grid)?;
        *out = Box::into_raw(Box::new(UmTensor(t)));
        Ok(())
    })
}

/// Reads an SVT1 file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn um_tensor_read(path: *const c_char, out: *mut *mut UmTensor) -> UmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let file = std::fs::File::open(path).map_err(Error::from)?;
        let t = read_voxel_tensor(std::io::BufReader::new(file))?;
        *out = Box::into_raw(Box::new(UmTensor(t)));
        Ok(())
    })
}

/// Number of voxels; 0 for null.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn um_tensor_len(t: *const UmTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// Feature width; 0 for null.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn um_tensor_channels(t: *const UmTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.channels())
}

/// # Safety
/// `t` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn um_tensor_free(t: *mut UmTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Writes the serialization permutation (`perm[k]` is the row at position
/// `k`) into `perm`, which must hold at least `um_tensor_len(t)` entries.
///
/// # Safety
/// `t` must be a live tensor handle and `perm` writable for `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn um_serialize(
    t: *const UmTensor,
    curve: UmCurve,
    perm: *mut usize,
    capacity: usize,
) -> UmStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("t"))?;
        if t.0.len() > capacity {
            return Err(Fail(
                UmStatus::InvalidArgument,
                format!("capacity {capacity} is below {} voxels", t.0.len()),
            ));
        }
        if perm.is_null() && !t.0.is_empty() {
            return Err(null("perm"));
        }
        let curve = match curve {
            UmCurve::ZOrderX => Curve::ZOrderX,
            UmCurve::ZOrderY => Curve::ZOrderY,
            UmCurve::Hilbert => Curve::Hilbert,
        };
        let order = make_order(&t.0, curve)?;
        if !order.perm.is_empty() {
            std::slice::from_raw_parts_mut(perm, order.perm.len()).copy_from_slice(&order.perm);
        }
        Ok(())
    })
}

/// Seeds the default backbone (strides 1, 2, 2 with 128 channels).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn um_backbone_new(seed: u64, out: *mut *mut UmBackbone) -> UmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = BackboneConfig {
            seed,
            ..BackboneConfig::default()
        };
        *out = Box::into_raw(Box::new(UmBackbone(BackboneParams::init(&cfg)?)));
        Ok(())
    })
}

/// Seeds a backbone from a `key = value` config file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn um_backbone_from_config(
    path: *const c_char,
    out: *mut *mut UmBackbone,
) -> UmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = std::fs::read_to_string(path_arg(path, "path")?).map_err(Error::from)?;
        let cfg = BackboneConfig::parse(&text)?;
        *out = Box::into_raw(Box::new(UmBackbone(BackboneParams::init(&cfg)?)));
        Ok(())
    })
}

/// Input feature width the backbone expects; 0 for null.
///
/// # Safety
/// `b` must be null or a live backbone handle.
#[no_mangle]
pub unsafe extern "C" fn um_backbone_channels(b: *const UmBackbone) -> usize {
    b.as_ref().map_or(0, |b| b.0.cfg.channels)
}

/// # Safety
/// `b` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn um_backbone_free(b: *mut UmBackbone) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// Runs the backbone on `t` and returns the BEV map.
///
/// # Safety
/// `b` and `t` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn um_backbone_forward(
    b: *const UmBackbone,
    t: *const UmTensor,
    out: *mut *mut UmBev,
) -> UmStatus {
    guard(|| {
        let b = b.as_ref().ok_or_else(|| null("b"))?;
        let t = t.as_ref().ok_or_else(|| null("t"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let result = backbone_forward(&t.0, &b.0)?;
        *out = Box::into_raw(Box::new(UmBev(result.bev)));
        Ok(())
    })
}

/// Writes `(X, Y, C)` into `shape`.
///
/// # Safety
/// `bev` must be a live handle and `shape` writable for three entries.
#[no_mangle]
pub unsafe extern "C" fn um_bev_shape(bev: *const UmBev, shape: *mut usize) -> UmStatus {
    guard(|| {
        let bev = bev.as_ref().ok_or_else(|| null("bev"))?;
        if shape.is_null() {
            return Err(null("shape"));
        }
        std::slice::from_raw_parts_mut(shape, 3).copy_from_slice(&bev.0.shape);
        Ok(())
    })
}

/// Row-major `(X, Y, C)` data, owned by the handle; null for null.
///
/// # Safety
/// `bev` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn um_bev_data(bev: *const UmBev) -> *const f32 {
    bev.as_ref().map_or(ptr::null(), |b| b.0.data.as_ptr())
}

/// # Safety
/// `bev` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn um_bev_free(bev: *mut UmBev) {
    if !bev.is_null() {
        drop(Box::from_raw(bev));
    }
}

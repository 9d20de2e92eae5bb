//! C ABI for scene generation, reward scoring, planning metrics and VDTN
//! tensor files.
//!
//! Every fallible function returns a [`VdStatus`]. On failure the message is
//! kept per thread and can be read with [`vd_last_error`]. Objects are opaque
//! handles owned by the caller and released with the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use vdrive::eval::{l2_metric, trajectory_collides, Footprint};
use vdrive::reward::{score, RewardConfig};
use vdrive::scene::{generate_scene, Point, Rect, SceneParams, SceneSample};
use vdrive::tensor::{read_vdtn, write_vdtn, Tensor};
use vdrive::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VdStatus {
    Ok = 0,
    NullPointer = 1,
    Invalid = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Divergence = 6,
    MissingCheckpoint = 7,
    /// The output buffer is too small; the required length was written.
    BufferTooSmall = 8,
    Panic = 9,
}

/// Generated driving scene.
pub struct VdScene(SceneSample);

/// `f32` tensor with row-major data.
pub struct VdTensor(Tensor<f32>);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct VdRewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub omega_h: f64,
    pub omega_a: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct VdRewardRecord {
    pub p_off: u32,
    pub r_center: f64,
    pub r_h: f64,
    pub r_a: f64,
    pub r: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> VdStatus {
    match e {
        Error::Shape { .. } => VdStatus::Shape,
        Error::Invalid(_) => VdStatus::Invalid,
        Error::Format(_) => VdStatus::Format,
        Error::Io { .. } | Error::Json { .. } => VdStatus::Io,
        Error::Divergence { .. } => VdStatus::Divergence,
        Error::MissingCheckpoint { .. } => VdStatus::MissingCheckpoint,
    }
}

enum Fail {
    Core(Error),
    Null(&'static str),
    Small,
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VdStatus::Ok,
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(name))) => {
            set_error(format!("`{name}` is null"));
            VdStatus::NullPointer
        }
        Ok(Err(Fail::Small)) => {
            set_error("output buffer too small".into());
            VdStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic".into());
            VdStatus::Panic
        }
    }
}

unsafe fn nonnull<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(name))
}

unsafe fn out<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(name))
}

unsafe fn view<'a, T>(p: *const T, n: usize, name: &'static str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn points(xy: *const f64, n: usize, name: &'static str) -> Result<Vec<Point>, Fail> {
    Ok(view(xy, 2 * n, name)?.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::Invalid("path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Generates a scene with default parameters.
///
/// # Safety
/// `out_scene` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vd_scene_generate(seed: u64, out_scene: *mut *mut VdScene) -> VdStatus {
    guard(|| {
        let slot = out(out_scene, "out_scene")?;
        let s = generate_scene(seed, &SceneParams::default())?;
        *slot = Box::into_raw(Box::new(VdScene(s)));
        Ok(())
    })
}

/// # Safety
/// `scene` must come from `vd_scene_generate` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vd_scene_free(scene: *mut VdScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vd_scene_size(scene: *const VdScene, height: *mut usize, width: *mut usize) -> VdStatus {
    guard(|| {
        let s = &nonnull(scene, "scene")?.0;
        *out(height, "height")? = s.height();
        *out(width, "width")? = s.width();
        Ok(())
    })
}

/// Copies the ground-truth trajectory as `x, y` pairs into `xy`, which holds
/// `capacity` points. `len` receives the point count.
///
/// # Safety
/// `xy` must hold `2 * capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn vd_scene_trajectory(
    scene: *const VdScene,
    xy: *mut f64,
    capacity: usize,
    len: *mut usize,
) -> VdStatus {
    guard(|| {
        let s = &nonnull(scene, "scene")?.0;
        let n = s.trajectory.len();
        *out(len, "len")? = n;
        if capacity < n {
            return Err(Fail::Small);
        }
        if xy.is_null() {
            return Err(Fail::Null("xy"));
        }
        let dst = slice::from_raw_parts_mut(xy, 2 * n);
        for (d, p) in dst.chunks_exact_mut(2).zip(&s.trajectory) {
            d.copy_from_slice(p);
        }
        Ok(())
    })
}

/// Copies obstacle rectangles as `x0, y0, x1, y1` into `rects`.
///
/// # Safety
/// `rects` must hold `4 * capacity` values.
#[no_mangle]
pub unsafe extern "C" fn vd_scene_obstacles(
    scene: *const VdScene,
    rects: *mut i64,
    capacity: usize,
    len: *mut usize,
) -> VdStatus {
    guard(|| {
        let s = &nonnull(scene, "scene")?.0;
        let n = s.obstacles.len();
        *out(len, "len")? = n;
        if capacity < n {
            return Err(Fail::Small);
        }
        if n > 0 && rects.is_null() {
            return Err(Fail::Null("rects"));
        }
        for (i, r) in s.obstacles.iter().enumerate() {
            let d = slice::from_raw_parts_mut(rects.add(4 * i), 4);
            d.copy_from_slice(&[r.x0, r.y0, r.x1, r.y1]);
        }
        Ok(())
    })
}

/// Default reward weights.
#[no_mangle]
pub extern "C" fn vd_reward_default_weights() -> VdRewardWeights {
    let c = RewardConfig::default();
    VdRewardWeights {
        alpha: c.alpha,
        beta: c.beta,
        omega_h: c.omega_h,
        omega_a: c.omega_a,
    }
}

/// Hybrid reward of an `n`-point trajectory in `scene`. A null `weights`
/// uses the defaults.
///
/// # Safety
/// `xy` must hold `2 * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn vd_reward_score(
    scene: *const VdScene,
    xy: *const f64,
    n: usize,
    weights: *const VdRewardWeights,
    record: *mut VdRewardRecord,
) -> VdStatus {
    guard(|| {
        let s = &nonnull(scene, "scene")?.0;
        let traj = points(xy, n, "xy")?;
        let mut cfg = RewardConfig::default();
        if let Some(w) = weights.as_ref() {
            cfg.alpha = w.alpha;
            cfg.beta = w.beta;
            cfg.omega_h = w.omega_h;
            cfg.omega_a = w.omega_a;
        }
        cfg.validate()?;
        let r = score(s, &traj, &cfg)?;
        *out(record, "record")? = VdRewardRecord {
            p_off: r.p_off,
            r_center: r.r_center,
            r_h: r.r_h,
            r_a: r.r_a,
            r: r.r,
        };
        Ok(())
    })
}

/// Mean waypoint distance over the first `buckets[i]` points, into `means[i]`.
///
/// # Safety
/// `pred` and `gt` hold `2 * n` doubles; `buckets` and `means` hold
/// `n_buckets` values.
#[no_mangle]
pub unsafe extern "C" fn vd_l2_metric(
    pred: *const f64,
    gt: *const f64,
    n: usize,
    buckets: *const usize,
    n_buckets: usize,
    means: *mut f64,
) -> VdStatus {
    guard(|| {
        let p = points(pred, n, "pred")?;
        let g = points(gt, n, "gt")?;
        let b = view(buckets, n_buckets, "buckets")?;
        let m = l2_metric(&p, &g, b)?;
        if n_buckets > 0 {
            if means.is_null() {
                return Err(Fail::Null("means"));
            }
            slice::from_raw_parts_mut(means, n_buckets).copy_from_slice(&m);
        }
        Ok(())
    })
}

/// Whether a `width x height` footprint centred on any waypoint overlaps any
/// of the `n_rects` rectangles (`x0, y0, x1, y1`).
///
/// # Safety
/// `xy` holds `2 * n` doubles, `rects` holds `4 * n_rects` values.
#[no_mangle]
pub unsafe extern "C" fn vd_trajectory_collides(
    xy: *const f64,
    n: usize,
    rects: *const i64,
    n_rects: usize,
    width: f64,
    height: f64,
    collides: *mut bool,
) -> VdStatus {
    guard(|| {
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::Invalid("footprint must have positive extent".into()).into());
        }
        let traj = points(xy, n, "xy")?;
        let rects: Vec<Rect> = view(rects, 4 * n_rects, "rects")?
            .chunks_exact(4)
            .map(|c| Rect {
                x0: c[0],
                y0: c[1],
                x1: c[2],
                y1: c[3],
            })
            .collect();
        *out(collides, "collides")? = trajectory_collides(&traj, &rects, Footprint { width, height });
        Ok(())
    })
}

/// Copies `len` values into a new tensor of the given dims.
///
/// # Safety
/// `dims` holds `rank` values and `data` holds `len` floats.
#[no_mangle]
pub unsafe extern "C" fn vd_tensor_new(
    dims: *const usize,
    rank: usize,
    data: *const f32,
    len: usize,
    out_tensor: *mut *mut VdTensor,
) -> VdStatus {
    guard(|| {
        let slot = out(out_tensor, "out_tensor")?;
        let d = view(dims, rank, "dims")?.to_vec();
        let v = view(data, len, "data")?.to_vec();
        *slot = Box::into_raw(Box::new(VdTensor(Tensor::new(d, v)?)));
        Ok(())
    })
}

/// # Safety
/// `tensor` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vd_tensor_free(tensor: *mut VdTensor) {
    if !tensor.is_null() {
        drop(Box::from_raw(tensor));
    }
}

/// Rank of the tensor, or 0 for null.
///
/// # Safety
/// `tensor` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn vd_tensor_rank(tensor: *const VdTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.0.rank())
}

/// Element count, or 0 for null.
///
/// # Safety
/// `tensor` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn vd_tensor_len(tensor: *const VdTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.0.len())
}

/// Pointer to the dims array, valid while the tensor lives.
///
/// # Safety
/// `tensor` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn vd_tensor_dims(tensor: *const VdTensor) -> *const usize {
    tensor.as_ref().map_or(ptr::null(), |t| t.0.dims().as_ptr())
}

/// Pointer to the data, valid while the tensor lives.
///
/// # Safety
/// `tensor` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn vd_tensor_data(tensor: *const VdTensor) -> *const f32 {
    tensor.as_ref().map_or(ptr::null(), |t| t.0.data().as_ptr())
}

/// # Safety
/// `path` must be a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn vd_tensor_write(tensor: *const VdTensor, path: *const c_char) -> VdStatus {
    guard(|| {
        let t = &nonnull(tensor, "tensor")?.0;
        write_vdtn(path_arg(path)?, t)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out_tensor` valid.
#[no_mangle]
pub unsafe extern "C" fn vd_tensor_read(path: *const c_char, out_tensor: *mut *mut VdTensor) -> VdStatus {
    guard(|| {
        let slot = out(out_tensor, "out_tensor")?;
        let t = read_vdtn(path_arg(path)?)?;
        *slot = Box::into_raw(Box::new(VdTensor(t)));
        Ok(())
    })
}

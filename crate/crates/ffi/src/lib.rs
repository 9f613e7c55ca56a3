//! C ABI over the core toolkit.
//!
//! Objects cross the boundary as opaque handles created by `*_read`/`*_new`
//! functions and released with the matching `*_free`. Every fallible call
//! returns an [`FdbmStatus`]; on failure the message is available from
//! [`fdbm_last_error`] on the same thread until the next failing call.
//! Panics are caught at the boundary and reported as `FDBM_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use fetaldbm::morphometry::{growth_rate, jacobian_log_det, label_volume};
use fetaldbm::pipeline::subject::run_subject_until;
use fetaldbm::pipeline::{PipelineConfig, UnitStatus};
use fetaldbm::record::read_cohort_csv;
use fetaldbm::registration::DeformationField;
use fetaldbm::stats::{tfce, TfceParams};
use fetaldbm::volume::{read_labels, read_volume, write_volume, ImageGrid, LabelMap, Volume};
use fetaldbm::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdbmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Io = 4,
    Geometry = 5,
    Numerical = 6,
    Pipeline = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Outcome of a subject run.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdbmUnitStatus {
    Ok = 0,
    Failed = 1,
    Excluded = 2,
    Incomplete = 3,
}

/// Opaque scalar volume.
pub struct FdbmVolume(Volume);

/// Opaque label map.
pub struct FdbmLabels(LabelMap);

/// Opaque dense deformation field.
pub struct FdbmField(DeformationField);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FdbmStatus {
    match e {
        Error::Io(_) | Error::Nifti(_) | Error::Json(_) | Error::Csv(_) => FdbmStatus::Io,
        Error::InvalidGrid(_) | Error::GeometryMismatch(_) => FdbmStatus::Geometry,
        Error::Diverged { .. } | Error::Registration(_) | Error::RankDeficient(_) => FdbmStatus::Numerical,
        Error::Stage { .. } | Error::TemplateMember { .. } | Error::Plot(_) => FdbmStatus::Pipeline,
        _ => FdbmStatus::InvalidInput,
    }
}

struct Fail(FdbmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, translating errors and panics into a status plus the thread's last error.
fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> FdbmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FdbmStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FdbmStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(FdbmStatus::NullPointer, format!("{what} is NULL"))
}

/// # Safety
/// `p` is NULL or a NUL-terminated string.
unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(FdbmStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// # Safety
/// `h` is NULL or a live handle of type `T`.
unsafe fn handle<'a, T>(h: *const T, what: &str) -> Result<&'a T, Fail> {
    h.as_ref().ok_or_else(|| null(what))
}

/// # Safety
/// `out` is NULL or writable.
unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fdbm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fdbm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a volume on a grid centered at the world origin with identity
/// direction. `data` holds `dims[0]·dims[1]·dims[2]` values, x fastest.
///
/// # Safety
/// `dims` and `spacing` point to 3 values, `data` to `len` values, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fdbm_volume_new(
    dims: *const usize,
    spacing: *const f64,
    data: *const f32,
    len: usize,
    out: *mut *mut FdbmVolume,
) -> FdbmStatus {
    guard(|| {
        if dims.is_null() || spacing.is_null() || data.is_null() {
            return Err(null("dims, spacing or data"));
        }
        let d = [0, 1, 2].map(|i| *dims.add(i));
        let s = [0, 1, 2].map(|i| *spacing.add(i));
        let grid = ImageGrid::centered(d, s)?;
        let vol = Volume::new(grid, std::slice::from_raw_parts(data, len).to_vec())?;
        put(out, Box::into_raw(Box::new(FdbmVolume(vol))), "out")
    })
}

/// Reads a scalar NIfTI volume (.nii or .nii.gz).
///
/// # Safety
/// `path` is a NUL-terminated string and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fdbm_volume_read(path: *const c_char, out: *mut *mut FdbmVolume) -> FdbmStatus {
    guard(|| {
        let vol = read_volume(path_arg(path, "path")?)?;
        put(out, Box::into_raw(Box::new(FdbmVolume(vol))), "out")
    })
}

/// # Safety
/// `vol` is a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fdbm_volume_write(vol: *const FdbmVolume, path: *const c_char) -> FdbmStatus {
    guard(|| Ok(write_volume(&handle(vol, "vol")?.0, path_arg(path, "path")?)?))
}

/// Releases a volume. NULL is ignored.
///
/// # Safety
/// `vol` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fdbm_volume_free(vol: *mut FdbmVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Writes the grid dimensions and spacing (mm) to 3-element arrays.
///
/// # Safety
/// `vol` is a live handle; `dims` and `spacing` are NULL or point to 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn fdbm_volume_geometry(vol: *const FdbmVolume, dims: *mut usize, spacing: *mut f64) -> FdbmStatus {
    guard(|| {
        let g = handle(vol, "vol")?.0.grid();
        for a in 0..3 {
            if !dims.is_null() {
                dims.add(a).write(g.dims()[a]);
            }
            if !spacing.is_null() {
                spacing.add(a).write(g.spacing()[a]);
            }
        }
        Ok(())
    })
}

/// Copies the voxel values (x fastest) into `buf`, which must hold at least
/// as many values as the volume has voxels.
///
/// # Safety
/// `vol` is a live handle and `buf` points to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn fdbm_volume_copy_data(vol: *const FdbmVolume, buf: *mut f32, len: usize) -> FdbmStatus {
    guard(|| {
        let data = handle(vol, "vol")?.0.data();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < data.len() {
            return Err(Fail(FdbmStatus::BufferTooSmall, format!("buffer holds {len} values, volume has {}", data.len())));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// Reads a label NIfTI file.
///
/// # Safety
/// `path` is a NUL-terminated string and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fdbm_labels_read(path: *const c_char, out: *mut *mut FdbmLabels) -> FdbmStatus {
    guard(|| {
        let labels = read_labels(path_arg(path, "path")?)?;
        put(out, Box::into_raw(Box::new(FdbmLabels(labels))), "out")
    })
}

/// # Safety
/// `labels` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fdbm_labels_free(labels: *mut FdbmLabels) {
    if !labels.is_null() {
        drop(Box::from_raw(labels));
    }
}

/// Volume (mm³) of the voxels carrying `label`.
///
/// # Safety
/// `labels` is a live handle and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fdbm_label_volume(labels: *const FdbmLabels, label: u16, out: *mut f64) -> FdbmStatus {
    guard(|| put(out, label_volume(&handle(labels, "labels")?.0, label), "out"))
}

/// Daily growth (mm³/day) between two volumes measured at the given GAs (weeks).
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fdbm_growth_rate(v_pre: f64, v_post: f64, ga_pre: f64, ga_post: f64, out: *mut f64) -> FdbmStatus {
    guard(|| put(out, growth_rate(v_pre, v_post, ga_pre, ga_post)?, "out"))
}

/// Reads a deformation field written by the pipeline.
///
/// # Safety
/// `path` is a NUL-terminated string and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fdbm_field_read(path: *const c_char, out: *mut *mut FdbmField) -> FdbmStatus {
    guard(|| {
        let field = DeformationField::read(path_arg(path, "path")?)?;
        put(out, Box::into_raw(Box::new(FdbmField(field))), "out")
    })
}

/// # Safety
/// `field` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fdbm_field_free(field: *mut FdbmField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Log-determinant of the field's Jacobian as a new volume. Non-positive
/// determinants are counted in `nonpositive` (may be NULL).
///
/// # Safety
/// `field` is a live handle, `out` is writable, `nonpositive` is NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn fdbm_jacobian_log_det(field: *const FdbmField, out: *mut *mut FdbmVolume, nonpositive: *mut usize) -> FdbmStatus {
    guard(|| {
        let (lj, diag) = jacobian_log_det(&handle(field, "field")?.0);
        if !nonpositive.is_null() {
            nonpositive.write(diag.nonpositive);
        }
        put(out, Box::into_raw(Box::new(FdbmVolume(lj))), "out")
    })
}

/// Threshold-free cluster enhancement of a statistic map (6-connectivity).
/// `dh <= 0` selects max|map| / 100.
///
/// # Safety
/// `map` is a live handle and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fdbm_tfce(map: *const FdbmVolume, e: f64, h: f64, dh: f64, out: *mut *mut FdbmVolume) -> FdbmStatus {
    guard(|| {
        let params = TfceParams { e, h, dh: (dh > 0.0).then_some(dh), ..Default::default() };
        let enhanced = tfce(&handle(map, "map")?.0, &params)?;
        put(out, Box::into_raw(Box::new(FdbmVolume(enhanced))), "out")
    })
}

/// Runs the subject flow for `subject_id` of the cohort table at `cohort_csv`.
/// `config` may be NULL for defaults. A failed subject is reported through
/// `unit_status` with `FDBM_STATUS_OK`; the returned status covers only
/// argument, configuration and I/O errors outside the stages.
///
/// # Safety
/// String arguments are NUL-terminated (or NULL where allowed); `unit_status` is writable.
#[no_mangle]
pub unsafe extern "C" fn fdbm_run_subject(
    config: *const c_char,
    cohort_csv: *const c_char,
    subject_id: *const c_char,
    data_dir: *const c_char,
    out_dir: *const c_char,
    unit_status: *mut FdbmUnitStatus,
) -> FdbmStatus {
    guard(|| {
        let cfg = if config.is_null() { PipelineConfig::default() } else { PipelineConfig::load(path_arg(config, "config")?)? };
        let records = read_cohort_csv(path_arg(cohort_csv, "cohort_csv")?)?;
        let id = path_arg(subject_id, "subject_id")?;
        let id = id.to_str().expect("checked as UTF-8");
        let record = records
            .iter()
            .find(|r| r.subject_id == id)
            .ok_or_else(|| Fail(FdbmStatus::InvalidInput, format!("subject {id} is not in the cohort table")))?;
        let (data, out) = (path_arg(data_dir, "data_dir")?, path_arg(out_dir, "out_dir")?);
        let outcome = run_subject_until(record, &cfg, Path::new(&data), Path::new(&out), None)?;
        if let Some(e) = &outcome.error {
            set_error(e.clone());
        }
        let status = match outcome.status {
            UnitStatus::Ok => FdbmUnitStatus::Ok,
            UnitStatus::Failed => FdbmUnitStatus::Failed,
            UnitStatus::Excluded => FdbmUnitStatus::Excluded,
            UnitStatus::Running => FdbmUnitStatus::Incomplete,
        };
        put(unit_status, status, "unit_status")
    })
}

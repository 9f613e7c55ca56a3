use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use fetaldbm::registration::DeformationField;
use fetaldbm::volume::ImageGrid;
use fetaldbm_ffi::*;

fn c(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(fdbm_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn volume_round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = c(&dir.path().join("v.nii.gz"));
    let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5).collect();
    unsafe {
        let mut v = ptr::null_mut();
        assert_eq!(fdbm_volume_new([2usize, 3, 4].as_ptr(), [1.0f64, 1.0, 2.0].as_ptr(), data.as_ptr(), data.len(), &mut v), FdbmStatus::Ok);
        assert_eq!(fdbm_volume_write(v, path.as_ptr()), FdbmStatus::Ok);
        fdbm_volume_free(v);

        let mut r = ptr::null_mut();
        assert_eq!(fdbm_volume_read(path.as_ptr(), &mut r), FdbmStatus::Ok);
        let (mut dims, mut spacing) = ([0usize; 3], [0f64; 3]);
        assert_eq!(fdbm_volume_geometry(r, dims.as_mut_ptr(), spacing.as_mut_ptr()), FdbmStatus::Ok);
        assert_eq!((dims, spacing), ([2, 3, 4], [1.0, 1.0, 2.0]));
        let mut back = vec![0f32; 24];
        assert_eq!(fdbm_volume_copy_data(r, back.as_mut_ptr(), 23), FdbmStatus::BufferTooSmall);
        assert_eq!(fdbm_volume_copy_data(r, back.as_mut_ptr(), back.len()), FdbmStatus::Ok);
        assert_eq!(back, data);
        fdbm_volume_free(r);
    }
}

#[test]
fn errors_are_codes_with_messages() {
    unsafe {
        let mut v = ptr::null_mut();
        assert_eq!(fdbm_volume_read(ptr::null(), &mut v), FdbmStatus::NullPointer);
        assert!(last_error().contains("path"));
        let missing = CString::new("/nonexistent/x.nii.gz").unwrap();
        assert_eq!(fdbm_volume_read(missing.as_ptr(), &mut v), FdbmStatus::Io);
        assert!(v.is_null());
        let data = [1.0f32; 8];
        assert_eq!(fdbm_volume_new([2usize, 2, 2].as_ptr(), [0.0f64, 1.0, 1.0].as_ptr(), data.as_ptr(), 8, &mut v), FdbmStatus::Geometry);
        assert_eq!(fdbm_volume_new([2usize, 2, 2].as_ptr(), [1.0f64; 3].as_ptr(), data.as_ptr(), 7, &mut v), FdbmStatus::InvalidInput);
        let mut g = 0.0;
        assert_eq!(fdbm_growth_rate(800.0, 2060.0, 23.2, 23.2, &mut g), FdbmStatus::InvalidInput);
        assert_eq!(fdbm_growth_rate(800.0, 2060.0, 23.2, 27.7, &mut g), FdbmStatus::Ok);
        assert!((g - 1260.0 / 31.5).abs() < 1e-9);
        fdbm_volume_free(ptr::null_mut());
        assert!(!CStr::from_ptr(fdbm_version()).to_str().unwrap().is_empty());
    }
}

#[test]
fn jacobian_of_uniform_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let grid = ImageGrid::isotropic(12, 1.0).unwrap();
    DeformationField::from_fn(grid, |p| [0.1 * p.x, 0.1 * p.y, 0.1 * p.z]).write(dir.path().join("f.nii.gz")).unwrap();
    let path = c(&dir.path().join("f.nii.gz"));
    unsafe {
        let mut f = ptr::null_mut();
        assert_eq!(fdbm_field_read(path.as_ptr(), &mut f), FdbmStatus::Ok);
        let (mut lj, mut nonpos) = (ptr::null_mut(), 99usize);
        assert_eq!(fdbm_jacobian_log_det(f, &mut lj, &mut nonpos), FdbmStatus::Ok);
        assert_eq!(nonpos, 0);
        let mut vals = vec![0f32; 12 * 12 * 12];
        assert_eq!(fdbm_volume_copy_data(lj, vals.as_mut_ptr(), vals.len()), FdbmStatus::Ok);
        let centre = 6 + 12 * (6 + 12 * 6);
        assert!((vals[centre] as f64 - 3.0 * 1.1f64.ln()).abs() < 1e-5, "{}", vals[centre]);
        fdbm_volume_free(lj);
        fdbm_field_free(f);
    }
}

#[test]
fn tfce_single_voxel_sum() {
    let mut data = vec![0f32; 27];
    data[13] = 1.0;
    unsafe {
        let (mut v, mut t) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(fdbm_volume_new([3usize; 3].as_ptr(), [1.0f64; 3].as_ptr(), data.as_ptr(), 27, &mut v), FdbmStatus::Ok);
        assert_eq!(fdbm_tfce(v, 0.5, 2.0, 0.1, &mut t), FdbmStatus::Ok);
        let mut out = [0f32; 27];
        fdbm_volume_copy_data(t, out.as_mut_ptr(), 27);
        // Σ_{k=1..10} 1^0.5 · (0.1k)² · 0.1
        let direct: f64 = (1..=10).map(|k| (0.1 * k as f64).powi(2) * 0.1).sum();
        assert!((out[13] as f64 - direct).abs() < 1e-6);
        assert_eq!(fdbm_tfce(v, 0.5, 2.0, -1.0, &mut t), FdbmStatus::Ok);
        fdbm_volume_free(t);
        fdbm_volume_free(v);
    }
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("fetaldbm.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["fdbm_volume_read", "fdbm_jacobian_log_det", "fdbm_run_subject", "FDBM_STATUS_PANIC", "typedef struct FdbmVolume FdbmVolume"] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(&src, "#include \"fetaldbm.h\"\nint main(void) { FdbmVolume *v = 0; return fdbm_volume_read(\"x\", &v) == FDBM_STATUS_OK; }\n").unwrap();
    match Command::new("cc").arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg("-I").arg(header.parent().unwrap()).arg(&src).output() {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("no C compiler available ({e}); skipped syntax check"),
    }
}

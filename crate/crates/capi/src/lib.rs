//! C ABI over the phenotyping pipeline.
//!
//! Every function returns a `ps_status`; on failure a thread-local
//! message is retrievable through `ps_last_error_message` until the
//! next failing call on the same thread. Handles are opaque and owned
//! by the caller via the matching `_new`/`_free` pair.

#![allow(non_camel_case_types)]
#![allow(clippy::not_unsafe_ptr_arg_deref)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use phenosfm::eval;
use phenosfm::phenometrics;
use phenosfm::pipeline::{emit_outputs, expand_glob, run, Config};
use phenosfm::raster::BitMask;

/// Result of every ABI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ps_status {
    PS_OK = 0,
    /// A value was out of its documented range.
    PS_ERR_INVALID_ARGUMENT = 1,
    /// A required pointer was null.
    PS_ERR_NULL_POINTER = 2,
    /// A string argument was not valid UTF-8.
    PS_ERR_UTF8 = 3,
    /// A configuration key or value was rejected.
    PS_ERR_CONFIG = 4,
    /// The batch ran but one or more frames failed.
    PS_ERR_RUN = 5,
    /// File input or output failed.
    PS_ERR_IO = 6,
    /// Unexpected internal failure.
    PS_ERR_INTERNAL = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(code: ps_status, message: impl AsRef<str>) -> ps_status {
    let c = CString::new(message.as_ref().replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error message unavailable").expect("static"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
    code
}

fn guard(body: impl FnOnce() -> ps_status) -> ps_status {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(ps_status::PS_ERR_INTERNAL, "internal panic"),
    }
}

/// Message for the most recent failure on this thread. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ps_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn cstr<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, ps_status> {
    if ptr.is_null() {
        return Err(fail(
            ps_status::PS_ERR_NULL_POINTER,
            format!("{name} is null"),
        ));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(ps_status::PS_ERR_UTF8, format!("{name} is not UTF-8")))
}

fn out_slot<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, ps_status> {
    if ptr.is_null() {
        return Err(fail(
            ps_status::PS_ERR_NULL_POINTER,
            format!("{name} is null"),
        ));
    }
    Ok(unsafe { &mut *ptr })
}

unsafe fn slice_arg<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], ps_status> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail(
            ps_status::PS_ERR_NULL_POINTER,
            format!("{name} is null with nonzero length"),
        ));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Sphere volume in cm3 from its radius in cm.
#[no_mangle]
pub extern "C" fn ps_sphere_volume(radius_cm: f64, out_cm3: *mut f64) -> ps_status {
    guard(|| {
        let out = match out_slot(out_cm3, "out_cm3") {
            Ok(o) => o,
            Err(s) => return s,
        };
        match phenometrics::sphere_volume(radius_cm) {
            Ok(v) => {
                *out = v;
                ps_status::PS_OK
            }
            Err(e) => fail(ps_status::PS_ERR_INVALID_ARGUMENT, e.to_string()),
        }
    })
}

/// Sphere volume in cm3 from a measured circumference in cm.
#[no_mangle]
pub extern "C" fn ps_volume_from_circumference(c_cm: f64, out_cm3: *mut f64) -> ps_status {
    guard(|| {
        let out = match out_slot(out_cm3, "out_cm3") {
            Ok(o) => o,
            Err(s) => return s,
        };
        match phenometrics::gt_volume_from_circumference(c_cm) {
            Ok(v) => {
                *out = v;
                ps_status::PS_OK
            }
            Err(e) => fail(ps_status::PS_ERR_INVALID_ARGUMENT, e.to_string()),
        }
    })
}

/// Single-leaf area in cm2 from the plant's leaf lengths, this leaf's
/// length, and the regression slope.
#[no_mangle]
pub extern "C" fn ps_leaf_area(
    lengths_cm: *const f64,
    n_lengths: usize,
    length_cm: f64,
    coeff: f64,
    out_cm2: *mut f64,
) -> ps_status {
    guard(|| {
        let lengths = match unsafe { slice_arg(lengths_cm, n_lengths, "lengths_cm") } {
            Ok(s) => s,
            Err(st) => return st,
        };
        let out = match out_slot(out_cm2, "out_cm2") {
            Ok(o) => o,
            Err(s) => return s,
        };
        match phenometrics::leaf_area(lengths, length_cm, coeff) {
            Ok(v) => {
                *out = v;
                ps_status::PS_OK
            }
            Err(e) => fail(ps_status::PS_ERR_INVALID_ARGUMENT, e.to_string()),
        }
    })
}

/// 100 minus the mean absolute percentage error of `detected` against
/// `truth`; both arrays have `n` entries.
#[no_mangle]
pub extern "C" fn ps_mean_precision(
    detected: *const f64,
    truth: *const f64,
    n: usize,
    out_percent: *mut f64,
) -> ps_status {
    guard(|| {
        let d = match unsafe { slice_arg(detected, n, "detected") } {
            Ok(s) => s,
            Err(st) => return st,
        };
        let t = match unsafe { slice_arg(truth, n, "truth") } {
            Ok(s) => s,
            Err(st) => return st,
        };
        let out = match out_slot(out_percent, "out_percent") {
            Ok(o) => o,
            Err(s) => return s,
        };
        match eval::mean_precision(d, t) {
            Ok(v) => {
                *out = v;
                ps_status::PS_OK
            }
            Err(e) => fail(ps_status::PS_ERR_INVALID_ARGUMENT, e.to_string()),
        }
    })
}

/// Intersection over union of two run-length encoded masks sharing one
/// `width` x `height` grid. Runs alternate unset/set pixel counts in
/// row-major order, starting with unset.
#[no_mangle]
pub extern "C" fn ps_mask_iou(
    runs_a: *const u64,
    n_runs_a: usize,
    runs_b: *const u64,
    n_runs_b: usize,
    width: usize,
    height: usize,
    out_iou: *mut f64,
) -> ps_status {
    guard(|| {
        let ra = match unsafe { slice_arg(runs_a, n_runs_a, "runs_a") } {
            Ok(s) => s,
            Err(st) => return st,
        };
        let rb = match unsafe { slice_arg(runs_b, n_runs_b, "runs_b") } {
            Ok(s) => s,
            Err(st) => return st,
        };
        let out = match out_slot(out_iou, "out_iou") {
            Ok(o) => o,
            Err(s) => return s,
        };
        let a = match BitMask::from_runs(ra, width, height) {
            Ok(m) => m,
            Err(e) => return fail(ps_status::PS_ERR_INVALID_ARGUMENT, e.to_string()),
        };
        let b = match BitMask::from_runs(rb, width, height) {
            Ok(m) => m,
            Err(e) => return fail(ps_status::PS_ERR_INVALID_ARGUMENT, e.to_string()),
        };
        match eval::iou(&a, &b) {
            Ok(v) => {
                *out = v;
                ps_status::PS_OK
            }
            Err(e) => fail(ps_status::PS_ERR_INVALID_ARGUMENT, e.to_string()),
        }
    })
}

/// Pipeline settings handle. Starts at the documented defaults.
pub struct ps_config {
    inner: Config,
}

/// Allocate a settings handle; release it with `ps_config_free`.
#[no_mangle]
pub extern "C" fn ps_config_new() -> *mut ps_config {
    Box::into_raw(Box::new(ps_config {
        inner: Config::default(),
    }))
}

/// Set one key from its text form, with the same names, ranges, and
/// rejection rules as the configuration file.
#[no_mangle]
pub extern "C" fn ps_config_set(
    cfg: *mut ps_config,
    key: *const c_char,
    value: *const c_char,
) -> ps_status {
    guard(|| {
        if cfg.is_null() {
            return fail(ps_status::PS_ERR_NULL_POINTER, "cfg is null");
        }
        let key = match unsafe { cstr(key, "key") } {
            Ok(s) => s,
            Err(st) => return st,
        };
        let value = match unsafe { cstr(value, "value") } {
            Ok(s) => s,
            Err(st) => return st,
        };
        let cfg = unsafe { &mut *cfg };
        match cfg.inner.set(key, value) {
            Ok(()) => ps_status::PS_OK,
            Err(e) => fail(ps_status::PS_ERR_CONFIG, e.to_string()),
        }
    })
}

/// Release a settings handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn ps_config_free(cfg: *mut ps_config) {
    if !cfg.is_null() {
        drop(unsafe { Box::from_raw(cfg) });
    }
}

/// Process the frame sequence matched by `frames_glob` with the mask
/// files matched by `masks_glob`, writing the measurement tables and
/// visualizations into `out_dir`. Outputs are still written when some
/// frames fail; the status then reports the failure.
#[no_mangle]
pub extern "C" fn ps_run_pipeline(
    cfg: *const ps_config,
    frames_glob: *const c_char,
    masks_glob: *const c_char,
    out_dir: *const c_char,
) -> ps_status {
    guard(|| {
        if cfg.is_null() {
            return fail(ps_status::PS_ERR_NULL_POINTER, "cfg is null");
        }
        let frames = match unsafe { cstr(frames_glob, "frames_glob") } {
            Ok(s) => s,
            Err(st) => return st,
        };
        let masks = match unsafe { cstr(masks_glob, "masks_glob") } {
            Ok(s) => s,
            Err(st) => return st,
        };
        let out = match unsafe { cstr(out_dir, "out_dir") } {
            Ok(s) => s,
            Err(st) => return st,
        };
        let cfg = unsafe { &*cfg };
        if let Err(e) = cfg.inner.validate() {
            return fail(ps_status::PS_ERR_CONFIG, e.to_string());
        }
        let frame_paths = match expand_glob(frames) {
            Ok(p) => p,
            Err(e) => return fail(ps_status::PS_ERR_IO, e.to_string()),
        };
        let mask_paths = match expand_glob(masks) {
            Ok(p) => p,
            Err(e) => return fail(ps_status::PS_ERR_IO, e.to_string()),
        };
        let report = match run(&cfg.inner, &frame_paths, &mask_paths) {
            Ok(r) => r,
            Err(e) => return fail(ps_status::PS_ERR_INVALID_ARGUMENT, e.to_string()),
        };
        if let Err(e) = emit_outputs(&report, &PathBuf::from(out)) {
            return fail(ps_status::PS_ERR_IO, e.to_string());
        }
        if report.all_frames_succeeded() {
            ps_status::PS_OK
        } else {
            let failures: Vec<String> = report
                .frames
                .iter()
                .filter_map(|f| match &f.outcome {
                    phenosfm::pipeline::FrameOutcome::Failed { error } => {
                        Some(format!("{}: {}", f.frame_id, error))
                    }
                    _ => None,
                })
                .collect();
            fail(ps_status::PS_ERR_RUN, failures.join("; "))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;
    use std::fs;
    use std::process::Command;

    fn last_error() -> String {
        unsafe {
            CStr::from_ptr(ps_last_error_message())
                .to_string_lossy()
                .into_owned()
        }
    }

    #[test]
    fn version_is_static() {
        let v = unsafe { CStr::from_ptr(ps_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn scalar_functions_match_the_library() {
        let mut v = 0.0;
        assert_eq!(ps_sphere_volume(1.0, &mut v), ps_status::PS_OK);
        assert!((v - 4.188790204786391).abs() < 1e-12);

        assert_eq!(
            ps_volume_from_circumference(2.0 * std::f64::consts::PI, &mut v),
            ps_status::PS_OK
        );
        assert!((v - 4.188790204786391).abs() < 1e-12);

        let lengths = [50.0, 60.0, 40.0];
        assert_eq!(
            ps_leaf_area(lengths.as_ptr(), lengths.len(), 50.0, 8.3, &mut v),
            ps_status::PS_OK
        );
        assert!((v - 440.0).abs() < 1e-9);

        let detected = [15.9, 17.2, 14.6];
        let truth = [16.0, 17.0, 15.0];
        assert_eq!(
            ps_mean_precision(detected.as_ptr(), truth.as_ptr(), 3, &mut v),
            ps_status::PS_OK
        );
        assert_eq!(v, eval::mean_precision(&detected, &truth).unwrap());
        assert!((v - 98.5106).abs() < 1e-3);
    }

    #[test]
    fn errors_set_codes_and_messages() {
        let mut v = 0.0;
        assert_eq!(
            ps_sphere_volume(-1.0, &mut v),
            ps_status::PS_ERR_INVALID_ARGUMENT
        );
        assert!(!last_error().is_empty());

        assert_eq!(
            ps_sphere_volume(1.0, std::ptr::null_mut()),
            ps_status::PS_ERR_NULL_POINTER
        );
        assert!(last_error().contains("out_cm3"));

        assert_eq!(
            ps_mean_precision(std::ptr::null(), std::ptr::null(), 2, &mut v),
            ps_status::PS_ERR_NULL_POINTER
        );
    }

    #[test]
    fn mask_iou_hand_case() {
        // 4x1 grid: a = pixels 0..2, b = pixels 1..4; IoU = 1/4.
        let runs_a = [0u64, 2, 2];
        let runs_b = [1u64, 3];
        let mut v = 0.0;
        assert_eq!(
            ps_mask_iou(runs_a.as_ptr(), 3, runs_b.as_ptr(), 2, 4, 1, &mut v),
            ps_status::PS_OK
        );
        assert!((v - 0.25).abs() < 1e-12);
    }

    #[test]
    fn config_handle_round_trips_and_rejects() {
        let cfg = ps_config_new();
        let key = CString::new("d_max").unwrap();
        let value = CString::new("64").unwrap();
        assert_eq!(ps_config_set(cfg, key.as_ptr(), value.as_ptr()), ps_status::PS_OK);
        unsafe {
            assert_eq!((*cfg).inner.d_max, 64);
        }

        let bad_key = CString::new("dmax").unwrap();
        assert_eq!(
            ps_config_set(cfg, bad_key.as_ptr(), value.as_ptr()),
            ps_status::PS_ERR_CONFIG
        );
        assert!(last_error().contains("dmax"));

        let bad_value = CString::new("huge").unwrap();
        assert_eq!(
            ps_config_set(cfg, key.as_ptr(), bad_value.as_ptr()),
            ps_status::PS_ERR_CONFIG
        );
        ps_config_free(cfg);
        ps_config_free(std::ptr::null_mut());
    }

    #[test]
    fn run_pipeline_end_to_end() {
        use phenosfm::io::save_color;
        use phenosfm::raster::segmentation_to_json;
        use phenosfm::synth::{render_frame, RigSpec, SceneObject, SceneSpec};

        let spec = SceneSpec {
            width: 192,
            height: 192,
            rig: RigSpec {
                focal_px: 800.0,
                cx: None,
                cy: None,
                height_cm: None,
                speed_cm_s: None,
                fps: None,
                frame_stride: None,
            },
            objects: vec![
                SceneObject::Plane {
                    depth_cm: 90.0,
                    texture_seed: 1,
                },
                SceneObject::Sphere {
                    center_cm: [0.0, 0.0, 82.0],
                    radius_cm: 8.0,
                    texture_seed: 2,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let step = spec.rig().baseline_cm();
        for i in 0..3 {
            let cam_x = (i as f64 - 1.0) * step;
            let id = format!("frame_{i:03}");
            let rendered = render_frame(&spec, cam_x, &id).unwrap();
            save_color(&dir.path().join(format!("{id}.png")), &rendered.image).unwrap();
            fs::write(
                dir.path().join(format!("mask_{i:03}.json")),
                segmentation_to_json(&rendered.segmentation),
            )
            .unwrap();
        }

        let cfg = ps_config_new();
        for (k, v) in [("focal_px", "800"), ("d_max", "32")] {
            let key = CString::new(k).unwrap();
            let value = CString::new(v).unwrap();
            assert_eq!(ps_config_set(cfg, key.as_ptr(), value.as_ptr()), ps_status::PS_OK);
        }
        let frames = CString::new(format!("{}/frame_*.png", dir.path().display())).unwrap();
        let masks = CString::new(format!("{}/mask_*.json", dir.path().display())).unwrap();
        let out = dir.path().join("out");
        let out_c = CString::new(out.to_str().unwrap()).unwrap();
        let status = ps_run_pipeline(cfg, frames.as_ptr(), masks.as_ptr(), out_c.as_ptr());
        assert_eq!(status, ps_status::PS_OK, "{}", last_error());
        ps_config_free(cfg);

        let csv = fs::read_to_string(out.join("plants.csv")).unwrap();
        assert!(csv.lines().count() >= 2, "{csv}");
        let diameter: f64 = csv.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
        assert!((diameter - 16.0).abs() / 16.0 < 0.05, "diameter {diameter}");
    }

    #[test]
    fn generated_header_covers_the_surface_and_compiles() {
        let header_path = concat!(env!("CARGO_MANIFEST_DIR"), "/include/phenosfm.h");
        let header = fs::read_to_string(header_path).expect("build.rs generated the header");
        for symbol in [
            "ps_version",
            "ps_last_error_message",
            "ps_sphere_volume",
            "ps_volume_from_circumference",
            "ps_leaf_area",
            "ps_mean_precision",
            "ps_mask_iou",
            "ps_config_new",
            "ps_config_set",
            "ps_config_free",
            "ps_run_pipeline",
            "PS_ERR_INVALID_ARGUMENT",
        ] {
            assert!(header.contains(symbol), "header is missing {symbol}");
        }

        let dir = tempfile::tempdir().unwrap();
        let main_c = dir.path().join("use_header.c");
        fs::write(
            &main_c,
            "#include \"phenosfm.h\"\nint main(void) { return (int)PS_OK; }\n",
        )
        .unwrap();
        let out = Command::new("cc")
            .arg("-fsyntax-only")
            .arg("-I")
            .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
            .arg(&main_c)
            .output()
            .expect("cc is available");
        assert!(
            out.status.success(),
            "header does not compile: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

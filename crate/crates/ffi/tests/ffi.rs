use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use hipseg_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(hs_last_error_message()) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

/// Two cubes of different size in an 8³ grid, plus one isolated voxel.
fn blobs() -> Vec<u8> {
    let mut data = vec![0u8; 512];
    let at = |x: usize, y: usize, z: usize| x * 64 + y * 8 + z;
    for x in 0..3 {
        for y in 0..3 {
            for z in 0..3 {
                data[at(x, y, z)] = 1;
            }
        }
    }
    for x in 5..7 {
        for y in 5..7 {
            for z in 5..7 {
                data[at(x, y, z)] = 1;
            }
        }
    }
    data[at(0, 7, 7)] = 1;
    data
}

unsafe fn mask(data: &[u8], shape: [usize; 3]) -> *mut HsMask {
    let mut m = ptr::null_mut();
    assert_eq!(hs_mask_from_data(data.as_ptr(), shape.as_ptr(), &mut m), HsStatus::Ok);
    m
}

#[test]
fn version_and_defaults() {
    let v = unsafe { CStr::from_ptr(hs_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let o = hs_predict_options_default();
    assert_eq!((o.threshold, o.keep, o.connectivity, o.assume_canonical), (0.5, 2, 26, false));
}

#[test]
fn null_pointers_are_reported() {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(hs_volume_read(ptr::null(), &mut out), HsStatus::NullPointer);
        assert!(last_error().contains("path"));
        assert!(out.is_null());
        let shape = [2usize, 2, 2];
        assert_eq!(hs_mask_from_data(ptr::null(), shape.as_ptr(), &mut out.cast()), HsStatus::NullPointer);
        let mut count = 0;
        assert_eq!(hs_mask_count(ptr::null(), &mut count), HsStatus::NullPointer);
        // Freeing null is a no-op.
        hs_mask_free(ptr::null_mut());
        hs_volume_free(ptr::null_mut());
        hs_ensemble_free(ptr::null_mut());
    }
}

#[test]
fn invalid_input_and_error_message() {
    unsafe {
        let ok = mask(&blobs(), [8, 8, 8]);
        let mut n = 0;
        assert_eq!(hs_count_components(ok, 4, &mut n), HsStatus::InvalidArgument);
        assert!(last_error().contains("6 or 26"));
        assert_eq!(hs_count_components(ok, 6, &mut n), HsStatus::Ok);
        assert!(last_error().is_empty(), "a successful call clears the message");
        let other = mask(&[0u8; 8], [2, 2, 2]);
        let mut d = 0.0;
        assert_eq!(hs_dice(ok, other, &mut d), HsStatus::ShapeMismatch);
        hs_mask_free(ok);
        hs_mask_free(other);

        let missing = cpath(Path::new("/nonexistent/volume.nii.gz"));
        let mut v = ptr::null_mut();
        assert_eq!(hs_volume_read(missing.as_ptr(), &mut v), HsStatus::Io);
        let mut e = ptr::null_mut();
        assert_ne!(hs_ensemble_load(missing.as_ptr(), &mut e), HsStatus::Ok);
    }
}

#[test]
fn nonzero_mask_values_are_foreground() {
    unsafe {
        let m = mask(&[0u8, 2, 0, 255, 0, 0, 0, 1], [2, 2, 2]);
        let mut count = 0;
        assert_eq!(hs_mask_count(m, &mut count), HsStatus::Ok);
        assert_eq!(count, 3);
        let mut back = [0u8; 8];
        assert_eq!(hs_mask_copy_data(m, back.as_mut_ptr(), 8), HsStatus::Ok);
        assert_eq!(back, [0, 1, 0, 1, 0, 0, 0, 1]);
        hs_mask_free(m);
    }
}

#[test]
fn mask_round_trip_and_components() {
    unsafe {
        let data = blobs();
        let m = mask(&data, [8, 8, 8]);
        let mut shape = [0usize; 3];
        assert_eq!(hs_mask_shape(m, shape.as_mut_ptr()), HsStatus::Ok);
        assert_eq!(shape, [8, 8, 8]);
        let mut count = 0;
        assert_eq!(hs_mask_count(m, &mut count), HsStatus::Ok);
        assert_eq!(count, 27 + 8 + 1);
        let mut back = vec![9u8; 512];
        assert_eq!(hs_mask_copy_data(m, back.as_mut_ptr(), back.len()), HsStatus::Ok);
        assert_eq!(back, data);
        assert_eq!(hs_mask_copy_data(m, back.as_mut_ptr(), 10), HsStatus::InvalidArgument);

        let mut n = 0;
        assert_eq!(hs_count_components(m, 26, &mut n), HsStatus::Ok);
        assert_eq!(n, 3);
        let mut kept = ptr::null_mut();
        assert_eq!(hs_keep_largest(m, 2, 6, &mut kept), HsStatus::Ok);
        assert_eq!(hs_mask_count(kept, &mut count), HsStatus::Ok);
        assert_eq!(count, 35);

        let mut d = 0.0;
        assert_eq!(hs_dice(m, kept, &mut d), HsStatus::Ok);
        assert!((d - 2.0 * 35.0 / 71.0).abs() < 1e-12);
        let mut s = HsScores::default();
        assert_eq!(hs_evaluate(kept, m, 0, &mut s), HsStatus::Ok);
        assert_eq!((s.precision, s.dice_right), (1.0, 1.0));
        assert!((s.recall - 35.0 / 36.0).abs() < 1e-12);
        hs_mask_free(kept);
        hs_mask_free(m);
    }
}

#[test]
fn mask_write_and_read() {
    let dir = tempfile::tempdir().unwrap();
    let path = cpath(&dir.path().join("m.nii.gz"));
    unsafe {
        let values: Vec<f32> = (0..512).map(|i| i as f32).collect();
        let spacing = [1.0, 1.5, 2.0];
        let mut v = ptr::null_mut();
        assert_eq!(hs_volume_from_data(values.as_ptr(), [8usize, 8, 8].as_ptr(), spacing.as_ptr(), &mut v), HsStatus::Ok);
        let mut shape = [0usize; 3];
        assert_eq!(hs_volume_shape(v, shape.as_mut_ptr()), HsStatus::Ok);
        assert_eq!(shape, [8, 8, 8]);

        let m = mask(&blobs(), [8, 8, 8]);
        assert_eq!(hs_mask_write(m, v, path.as_ptr()), HsStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(hs_mask_read(path.as_ptr(), &mut back), HsStatus::Ok);
        let mut d = 0.0;
        assert_eq!(hs_dice(m, back, &mut d), HsStatus::Ok);
        assert_eq!(d, 1.0);

        let small = mask(&[1u8; 8], [2, 2, 2]);
        assert_eq!(hs_mask_write(small, v, path.as_ptr()), HsStatus::ShapeMismatch);
        for h in [m, back, small] {
            hs_mask_free(h);
        }
        hs_volume_free(v);
    }
}

#[test]
fn predict_with_a_trained_ensemble() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let model = root.path().join("model");
    let run = |args: &[&str]| {
        let argv = std::iter::once("hipseg").chain(args.iter().copied()).map(String::from).collect();
        hipseg::cli::run(argv).unwrap()
    };
    let d = data.to_str().unwrap();
    run(&["--out", d, "synth", "--count", "4", "--seed", "9", "--shape", "32", "32", "32", "--split", "0.5,0.25,0.25"]);
    run(&[
        "--out", model.to_str().unwrap(), "train", "--dataset", d, "--max-epochs", "2", "--patience", "1",
        "--epoch-sizes", "8,8,8", "--batch-size", "8", "--depth", "2", "--base-width", "2",
        "--set", "sampler.patch_size=[32,32]",
    ]);
    let ds = hipseg::cli::dataset::Dataset::open(&data).unwrap();
    let item = &ds.manifest.items[0];
    let volume_path = cpath(&ds.root.join(&item.volume));
    let model_path = cpath(&model);
    unsafe {
        let mut e = ptr::null_mut();
        assert_eq!(hs_ensemble_load(model_path.as_ptr(), &mut e), HsStatus::Ok, "{}", last_error());
        let mut v = ptr::null_mut();
        assert_eq!(hs_volume_read(volume_path.as_ptr(), &mut v), HsStatus::Ok, "{}", last_error());

        let mut m = ptr::null_mut();
        assert_eq!(hs_predict(e, v, ptr::null(), &mut m), HsStatus::Ok, "{}", last_error());
        let mut shape = [0usize; 3];
        assert_eq!(hs_mask_shape(m, shape.as_mut_ptr()), HsStatus::Ok);
        assert_eq!(shape, [32, 32, 32]);
        let mut n = 0;
        assert_eq!(hs_count_components(m, 26, &mut n), HsStatus::Ok);
        assert!(n <= 2);

        let mut o = hs_predict_options_default();
        o.threshold = 1.5;
        let mut bad = ptr::null_mut();
        assert_eq!(hs_predict(e, v, &o, &mut bad), HsStatus::InvalidArgument);
        assert!(bad.is_null());

        // Raw data carries canonical orientation, so it predicts directly.
        let values = vec![0.0f32; 32 * 32 * 32];
        let mut raw = ptr::null_mut();
        assert_eq!(hs_volume_from_data(values.as_ptr(), shape.as_ptr(), ptr::null(), &mut raw), HsStatus::Ok);
        let mut blank = ptr::null_mut();
        assert_eq!(hs_predict(e, raw, ptr::null(), &mut blank), HsStatus::Ok, "{}", last_error());

        for h in [m, blank] {
            hs_mask_free(h);
        }
        hs_volume_free(v);
        hs_volume_free(raw);
        hs_ensemble_free(e);
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("hipseg.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["hs_predict", "hs_last_error_message", "HS_STATUS_NULL_POINTER", "typedef struct HsMask HsMask"] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let program = dir.path().join("use.c");
    std::fs::write(
        &program,
        r#"#include "hipseg.h"
int main(void) {
    HsMask *m = NULL;
    size_t shape[3] = {2, 2, 2};
    uint8_t data[8] = {0};
    HsPredictOptions o = hs_predict_options_default();
    HsStatus s = hs_mask_from_data(data, shape, &m);
    if (s != HS_STATUS_OK) return (int)s;
    hs_mask_free(m);
    return (int)o.keep - 2;
}
"#,
    )
    .unwrap();
    let include = header.parent().unwrap();
    for (compiler, extra) in [("cc", vec!["-x", "c", "-std=c99"]), ("c++", vec!["-x", "c++"])] {
        let status = match std::process::Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
            .arg(include)
            .args(&extra)
            .arg(&program)
            .status()
        {
            Ok(s) => s,
            Err(_) => {
                eprintln!("{compiler} not available; skipping");
                continue;
            }
        };
        assert!(status.success(), "{compiler} rejected the header");
    }
}

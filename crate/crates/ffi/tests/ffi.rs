use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use fundus_synth::config::ModelConfig;
use fundus_synth::imaging::{batch, synthesize_toy_fundus, unbatch};
use fundus_synth::model::sample_novel;
use fundus_synth::training::{fit, Checkpoint, FitOptions, TrainConfig};
use fundus_synth_ffi::*;

fn last_error() -> String {
    let p = fs_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_checkpoint(dir: &Path) -> (CString, Checkpoint) {
    let cfg = TrainConfig {
        model: ModelConfig::tiny(),
        batch_size: 4,
        total_steps: 2,
        ..TrainConfig::default()
    };
    let data: Vec<_> = (0..8).map(|s| synthesize_toy_fundus(s, 32).unwrap().0).collect();
    let ck = fit(&cfg, &data, &FitOptions::default()).unwrap().checkpoint().unwrap();
    let path = dir.join("ck.bin");
    ck.save(&path).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), ck)
}

fn load(path: &CString) -> *mut FsModel {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { fs_model_load(path.as_ptr(), &mut h) }, FsStatus::Ok);
    assert!(!h.is_null());
    h
}

#[test]
fn null_arguments_are_reported_not_dereferenced() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { fs_model_load(ptr::null(), &mut h) }, FsStatus::NullPointer);
    assert!(last_error().contains("path"));
    assert!(h.is_null());
    let mut v = 0.0;
    assert_eq!(unsafe { fs_ssim(ptr::null(), ptr::null(), 32, &mut v) }, FsStatus::NullPointer);
    assert_eq!(unsafe { fs_model_image_size(ptr::null()) }, 0);
    assert!(!unsafe { fs_model_has_prior(ptr::null()) });
    unsafe { fs_model_free(ptr::null_mut()) };
}

#[test]
fn missing_and_corrupt_checkpoints_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("nope.bin").to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { fs_model_load(missing.as_ptr(), &mut h) }, FsStatus::Io);
    assert!(last_error().contains("nope.bin"));
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fs_model_load(bad.as_ptr(), &mut h) }, FsStatus::Checkpoint);
    assert!(h.is_null());
}

#[test]
fn model_calls_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ck) = tiny_checkpoint(dir.path());
    let h = load(&path);
    assert_eq!(unsafe { fs_model_image_size(h) }, 32);
    assert!(unsafe { fs_model_has_prior(h) });

    let model = ck.model().unwrap();
    let imgs: Vec<_> = (20..22).map(|s| synthesize_toy_fundus(s, 32).unwrap().0).collect();
    let x = batch(&imgs.iter().collect::<Vec<_>>()).unwrap();
    let want = model.reconstruct(&x, ck.config.delta).unwrap();
    let mut out = vec![0f32; x.numel()];
    let st = unsafe { fs_model_reconstruct(h, x.data().as_ptr(), 2, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, FsStatus::Ok);
    assert_eq!(out, want.data());

    let st = unsafe { fs_model_reconstruct(h, x.data().as_ptr(), 2, out.as_mut_ptr(), out.len() - 1) };
    assert_eq!(st, FsStatus::InvalidArgument);
    assert!(last_error().contains("required"));

    let want: Vec<f32> = sample_novel(&model, ck.prior.as_ref().unwrap(), 3, 5, 0.7)
        .unwrap()
        .iter()
        .flat_map(|i| i.tensor().data().to_vec())
        .collect();
    let mut out = vec![0f32; want.len()];
    assert_eq!(unsafe { fs_model_sample(h, 3, 5, 0.7, out.as_mut_ptr(), out.len()) }, FsStatus::Ok);
    assert_eq!(out, want);
    assert_ne!(unsafe { fs_model_sample(h, 3, 5, 1.5, out.as_mut_ptr(), out.len()) }, FsStatus::Ok);
    unsafe { fs_model_free(h) };
}

#[test]
fn reconstruction_round_trips_through_unbatch_layout() {
    // the buffer layout is N×3×S×S, identical to the library's batch layout
    let imgs: Vec<_> = (0..2).map(|s| synthesize_toy_fundus(s, 32).unwrap().0).collect();
    let x = batch(&imgs.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(unbatch(&x).unwrap(), imgs);
    let flat: Vec<f32> = imgs.iter().flat_map(|i| i.tensor().data().to_vec()).collect();
    assert_eq!(flat, x.data());
}

#[test]
fn toy_images_and_ssim() {
    let (img, params) = synthesize_toy_fundus(3, 32).unwrap();
    let mut buf = vec![0f32; 3 * 32 * 32];
    let mut lesions = false;
    assert_eq!(unsafe { fs_toy_fundus(3, 32, buf.as_mut_ptr(), buf.len(), &mut lesions) }, FsStatus::Ok);
    assert_eq!(buf, img.tensor().data());
    assert_eq!(lesions, params.has_lesions());
    assert_ne!(unsafe { fs_toy_fundus(3, 33, buf.as_mut_ptr(), buf.len(), ptr::null_mut()) }, FsStatus::Ok);

    let mut v = 0.0;
    assert_eq!(unsafe { fs_ssim(buf.as_ptr(), buf.as_ptr(), 32, &mut v) }, FsStatus::Ok);
    assert!((v - 1.0).abs() < 1e-9);
    let other: Vec<f32> = buf.iter().map(|p| -p).collect();
    assert_eq!(unsafe { fs_ssim(buf.as_ptr(), other.as_ptr(), 32, &mut v) }, FsStatus::Ok);
    assert!(v < 0.5);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(fs_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/fundus_synth.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "fs_last_error",
        "fs_version",
        "fs_model_load",
        "fs_model_free",
        "fs_model_image_size",
        "fs_model_has_prior",
        "fs_model_reconstruct",
        "fs_model_sample",
        "fs_toy_fundus",
        "fs_ssim",
        "FS_STATUS_NULL_POINTER",
        "typedef struct FsModel FsModel",
    ] {
        assert!(text.contains(f), "header lacks {f}");
    }
    // syntax-check with the system C compiler when one is installed
    if let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .output()
    {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use nightflow_ffi::*;

fn last_error() -> Option<String> {
    let p = nf_last_error();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

fn small_config() -> *mut NfConfig {
    let cfg = nf_config_new();
    for kv in ["epochs_stage1=1", "epochs_stage2=1", "epochs_stage3=1", "batch_size=2", "samples=8"] {
        let c = CString::new(kv).unwrap();
        assert_eq!(unsafe { nf_config_set(cfg, c.as_ptr()) }, NfStatus::Ok);
    }
    cfg
}

#[test]
fn flow_error_matches_three_four_five() {
    let (u, v, z) = ([3.0; 16], [4.0; 16], [0.0; 16]);
    let (mut epe, mut fl) = (0.0, 0.0);
    let s = unsafe { nf_flow_error(u.as_ptr(), v.as_ptr(), z.as_ptr(), z.as_ptr(), 4, 4, &mut epe, &mut fl) };
    assert_eq!(s, NfStatus::Ok, "{:?}", last_error());
    assert!((epe - 5.0).abs() < 1e-12);
    assert_eq!(fl, 100.0);
    assert!(last_error().is_none());
}

#[test]
fn null_pointers_and_bad_values_map_to_codes() {
    let z = [0.0; 4];
    let mut out = 0.0;
    let s = unsafe { nf_flow_error(ptr::null(), z.as_ptr(), z.as_ptr(), z.as_ptr(), 2, 2, &mut out, &mut out) };
    assert_eq!(s, NfStatus::NullPointer);
    assert!(last_error().unwrap().contains("null"));

    let cfg = nf_config_new();
    let bad = CString::new("tau=-1").unwrap();
    assert_eq!(unsafe { nf_config_set(cfg, bad.as_ptr()) }, NfStatus::InvalidArgument);
    let unknown = CString::new("no_such_key=1").unwrap();
    assert_eq!(unsafe { nf_config_set(cfg, unknown.as_ptr()) }, NfStatus::InvalidArgument);

    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut model: *mut NfModel = ptr::null_mut();
    assert_eq!(unsafe { nf_model_load(missing.as_ptr(), &mut model) }, NfStatus::Io);
    assert!(model.is_null());
    unsafe { nf_config_free(cfg) };
}

#[test]
fn stage_order_is_enforced() {
    let cfg = small_config();
    let mut ds: *mut NfDataset = ptr::null_mut();
    assert_eq!(unsafe { nf_dataset_generate(3, 2, 32, 2.0, &mut ds) }, NfStatus::Ok, "{:?}", last_error());
    let mut m: *mut NfModel = ptr::null_mut();
    let s = unsafe { nf_train_stage(3, ds, ptr::null(), ptr::null(), cfg, &mut m) };
    assert_eq!(s, NfStatus::InvalidArgument);
    assert_eq!(unsafe { nf_train_stage(4, ds, ptr::null(), ptr::null(), cfg, &mut m) }, NfStatus::InvalidArgument);
    unsafe {
        nf_dataset_free(ds);
        nf_config_free(cfg);
    }
}

#[test]
fn train_save_load_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let mut ds: *mut NfDataset = ptr::null_mut();
    assert_eq!(unsafe { nf_dataset_generate(5, 2, 32, 2.0, &mut ds) }, NfStatus::Ok);
    let data_path = CString::new(dir.path().join("data").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { nf_dataset_save(ds, data_path.as_ptr()) }, NfStatus::Ok);
    let mut loaded: *mut NfDataset = ptr::null_mut();
    assert_eq!(unsafe { nf_dataset_load(data_path.as_ptr(), &mut loaded) }, NfStatus::Ok);
    assert_eq!(unsafe { nf_dataset_len(loaded) }, 2);

    let mut m1: *mut NfModel = ptr::null_mut();
    assert_eq!(unsafe { nf_train_stage(1, loaded, ptr::null(), ptr::null(), cfg, &mut m1) }, NfStatus::Ok, "{:?}", last_error());
    assert_eq!(unsafe { nf_model_stage(m1) }, 1);
    let ck = CString::new(dir.path().join("s1.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { nf_model_save(m1, ck.as_ptr()) }, NfStatus::Ok);
    let mut back: *mut NfModel = ptr::null_mut();
    assert_eq!(unsafe { nf_model_load(ck.as_ptr(), &mut back) }, NfStatus::Ok);

    let n = 32 * 32;
    let (mut u, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (mut u2, mut v2) = (vec![1.0; n], vec![1.0; n]);
    unsafe {
        assert_eq!(nf_predict(m1, NfModelKind::Day, ds, 0, cfg, u.as_mut_ptr(), v.as_mut_ptr(), n), NfStatus::Ok);
        assert_eq!(nf_predict(back, NfModelKind::Day, ds, 0, cfg, u2.as_mut_ptr(), v2.as_mut_ptr(), n), NfStatus::Ok);
        assert_eq!(nf_predict(back, NfModelKind::Day, ds, 0, cfg, u2.as_mut_ptr(), v2.as_mut_ptr(), n - 1), NfStatus::InvalidArgument);
        assert_eq!(nf_predict(back, NfModelKind::Night, ds, 0, cfg, u2.as_mut_ptr(), v2.as_mut_ptr(), n), NfStatus::InvalidArgument);
    }
    assert_eq!((&u, &v), (&u2, &v2));

    let mut report: *mut NfReport = ptr::null_mut();
    assert_eq!(unsafe { nf_evaluate(m1, NfModelKind::Day, ds, cfg, &mut report) }, NfStatus::Ok);
    let (mut epe, mut fl, mut band) = (f64::NAN, f64::NAN, 0.0);
    assert_eq!(unsafe { nf_report_metrics(report, &mut epe, &mut fl, &mut band) }, NfStatus::Ok);
    assert!(epe >= 0.0 && (0.0..=100.0).contains(&fl));
    let mut json: *mut std::ffi::c_char = ptr::null_mut();
    assert_eq!(unsafe { nf_report_json(report, &mut json) }, NfStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    assert!(text.contains("\"mean_epe\""));

    let mut m2: *mut NfModel = ptr::null_mut();
    assert_eq!(unsafe { nf_train_stage(2, ds, ptr::null(), m1, cfg, &mut m2) }, NfStatus::Ok, "{:?}", last_error());
    assert_eq!(unsafe { nf_model_stage(m2) }, 2);
    unsafe {
        nf_string_free(json);
        nf_report_free(report);
        nf_model_free(m2);
        nf_model_free(back);
        nf_model_free(m1);
        nf_dataset_free(loaded);
        nf_dataset_free(ds);
        nf_config_free(cfg);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/nightflow.h")).unwrap();
    let src = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 20);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct NfModel NfModel;"));
    assert!(header.contains("NF_STATUS_NULL_POINTER = 7"));
}

/// Compiles and runs a C program against the header and the static library.
#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libnightflow_ffi.a");
    if !lib.exists() {
        panic!("static library not found at {}", lib.display());
    }
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler available; skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("c smoke ok"));
}

use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use vmcnet::backbone::{ForwardOptions, VmcNet};
use vmcnet::config::RunConfig;
use vmcnet::container::Container;
use vmcnet::{DType, Tensor};
use vmcnet_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(vmc_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn image(h: usize, w: usize) -> Vec<f64> {
    (0..h * w * 3).map(|i| ((i * 7) % 23) as f64 / 22.0).collect()
}

fn new_model(seed: u64) -> *mut VmcModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { vmc_model_new(ptr::null(), seed, &mut m) }, VmcStatus::Ok);
    assert!(!m.is_null());
    m
}

fn level_data(p: *const VmcPyramid, l: usize) -> (Vec<usize>, Vec<f64>) {
    let mut shape = [0usize; 4];
    let mut rank = 0;
    unsafe {
        assert_eq!(vmc_pyramid_level_shape(p, l, shape.as_mut_ptr(), &mut rank), VmcStatus::Ok);
        let len = shape.iter().product();
        let mut buf = vec![0.0; len];
        assert_eq!(vmc_pyramid_level_data(p, l, buf.as_mut_ptr(), len), VmcStatus::Ok);
        (shape[..rank].to_vec(), buf)
    }
}

#[test]
fn forward_matches_library() {
    let (h, w) = (64, 64);
    let img = image(h, w);
    let m = new_model(11);
    let mut p = ptr::null_mut();
    let status = unsafe { vmc_model_forward(m, img.as_ptr(), 1, h, w, VmcMode::Configured as i32, false, &mut p) };
    assert_eq!(status, VmcStatus::Ok, "{}", last_error());

    let cfg = RunConfig::with_seed(11);
    let net = VmcNet::new(cfg.model(), 11).unwrap();
    let t = Tensor::new(vec![1, h, w, 3], img).unwrap();
    let want = net
        .forward(&t, ForwardOptions { mode: cfg.mode, full_depth: false })
        .unwrap();
    for l in 0..4 {
        let (shape, data) = level_data(p, l);
        assert_eq!(shape, want.levels[l].shape());
        assert_eq!(data, want.levels[l].data());
        assert_eq!(shape[1], h >> (l + 2));
    }
    let mut shape = [0usize; 4];
    let mut rank = 0;
    assert_eq!(
        unsafe { vmc_pyramid_level_shape(p, 4, shape.as_mut_ptr(), &mut rank) },
        VmcStatus::InvalidArgument
    );
    assert!(last_error().contains("full_depth"));
    unsafe {
        vmc_pyramid_free(p);
        vmc_model_free(m);
    }
}

#[test]
fn null_pointers_and_bad_arguments() {
    unsafe {
        assert_eq!(vmc_model_new(ptr::null(), 1, ptr::null_mut()), VmcStatus::NullPointer);
        let mut p = ptr::null_mut();
        let img = image(64, 64);
        assert_eq!(vmc_model_forward(ptr::null(), img.as_ptr(), 1, 64, 64, 0, false, &mut p), VmcStatus::NullPointer);
        assert!(last_error().contains("model"));

        let m = new_model(2);
        assert_eq!(vmc_model_forward(m, ptr::null(), 1, 64, 64, 0, false, &mut p), VmcStatus::NullPointer);
        assert_eq!(vmc_model_forward(m, img.as_ptr(), 1, 64, 64, 9, false, &mut p), VmcStatus::InvalidArgument);
        assert_eq!(vmc_model_forward(m, img.as_ptr(), 0, 64, 64, 0, false, &mut p), VmcStatus::InvalidArgument);
        let odd = image(48, 48);
        let s = vmc_model_forward(m, odd.as_ptr(), 1, 48, 48, 0, false, &mut p);
        assert_ne!(s, VmcStatus::Ok);
        assert!(p.is_null());
        assert!(!last_error().is_empty());

        let (mut f, mut t) = (0u64, 0u64);
        assert_eq!(vmc_model_parameter_counts(m, &mut f, ptr::null_mut()), VmcStatus::NullPointer);
        assert_eq!(vmc_model_parameter_counts(m, &mut f, &mut t), VmcStatus::Ok);
        assert!(f > 0 && t > 0);
        assert!(last_error().is_empty());

        let missing = CString::new("/nonexistent/weights.vmcw").unwrap();
        assert_eq!(vmc_model_load_weights(m, missing.as_ptr()), VmcStatus::Io);
        assert!(last_error().contains("weights.vmcw"));

        let bad_json = CString::new("{\"seed\": 1, \"bogus\": true}").unwrap();
        let mut m2 = ptr::null_mut();
        assert_eq!(vmc_model_new(bad_json.as_ptr(), 1, &mut m2), VmcStatus::Config);
        assert!(m2.is_null());

        vmc_model_free(m);
        vmc_model_free(ptr::null_mut());
        vmc_pyramid_free(ptr::null_mut());
    }
}

#[test]
fn weights_round_trip_through_container() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.vmcw");
    let src = VmcNet::new(RunConfig::with_seed(5).model(), 5).unwrap();
    Container::from_model(src.params(), src.bn_states(), DType::F64)
        .unwrap()
        .save(&path)
        .unwrap();

    let img = image(64, 64);
    let run = |m: *mut VmcModel| {
        let mut p = ptr::null_mut();
        assert_eq!(
            unsafe { vmc_model_forward(m, img.as_ptr(), 1, 64, 64, -1, false, &mut p) },
            VmcStatus::Ok
        );
        let out = level_data(p, 0).1;
        unsafe { vmc_pyramid_free(p) };
        out
    };
    let a = new_model(5);
    let b = new_model(6);
    assert_ne!(run(a), run(b));
    let c = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { vmc_model_load_weights(b, c.as_ptr()) }, VmcStatus::Ok, "{}", last_error());
    assert_eq!(run(a), run(b));

    std::fs::write(&path, b"NOPE").unwrap();
    assert_eq!(unsafe { vmc_model_load_weights(b, c.as_ptr()) }, VmcStatus::Format);
    assert!(last_error().contains("w.vmcw"));
    unsafe {
        vmc_model_free(a);
        vmc_model_free(b);
    }
}

#[test]
fn score_functions() {
    let sp = [0.8, 0.3, 1.0];
    let sv = [0.2, 0.3, 0.0];
    let mut out = [0.0; 3];
    unsafe {
        assert_eq!(vmc_fuse_scores(sp.as_ptr(), sv.as_ptr(), 3, 1.0, out.as_mut_ptr()), VmcStatus::Ok);
        assert_eq!(out, sp);
        assert_eq!(vmc_fuse_scores(sp.as_ptr(), sv.as_ptr(), 3, 0.0, out.as_mut_ptr()), VmcStatus::Ok);
        assert_eq!(out, sv);
        assert_eq!(vmc_fuse_scores(sp.as_ptr(), sv.as_ptr(), 3, 1.5, out.as_mut_ptr()), VmcStatus::InvalidArgument);
        let neg = [-0.1, 0.3, 1.0];
        assert_ne!(vmc_fuse_scores(neg.as_ptr(), sv.as_ptr(), 3, 0.5, out.as_mut_ptr()), VmcStatus::Ok);
        assert_eq!(vmc_fuse_scores(sp.as_ptr(), ptr::null(), 3, 0.5, out.as_mut_ptr()), VmcStatus::NullPointer);
    }

    let region = [1.0, 0.0, 0.5, 0.5];
    let text = [1.0, 0.0, 0.0, 1.0, 0.6, 0.8];
    let mut scores = [0.0; 6];
    unsafe {
        assert_eq!(
            vmc_vlm_scores(region.as_ptr(), 2, text.as_ptr(), 3, 2, 10.0, scores.as_mut_ptr()),
            VmcStatus::Ok,
            "{}",
            last_error()
        );
    }
    for row in scores.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(scores[0] > scores[1]);
    let not_unit = [2.0, 0.0, 0.0, 1.0, 0.6, 0.8];
    assert_eq!(
        unsafe { vmc_vlm_scores(region.as_ptr(), 2, not_unit.as_ptr(), 3, 2, 10.0, scores.as_mut_ptr()) },
        VmcStatus::InvalidArgument
    );
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

fn have(tool: &str) -> bool {
    Command::new(tool).arg("--version").output().is_ok_and(|o| o.status.success())
}

#[test]
fn header_is_current_and_c_smoke_links() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include/vmcnet.h");
    let text = std::fs::read_to_string(&header).expect("header generated by build.rs");
    for sym in [
        "vmc_model_new",
        "vmc_model_forward",
        "vmc_pyramid_level_data",
        "vmc_fuse_scores",
        "vmc_vlm_scores",
        "vmc_last_error_message",
        "VMC_STATUS_NULL_POINTER",
        "VMC_MODE_FM_STAR",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }

    let cc = ["cc", "gcc", "clang"].into_iter().find(|c| have(c));
    let Some(cc) = cc else {
        eprintln!("no C compiler found; skipping link check");
        return;
    };
    let lib = target_dir().join("libvmcnet_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let out = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(crate_dir.join("include"))
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "compile failed:\n{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "smoke exited {:?}\n{stdout}\n{}", run.status, String::from_utf8_lossy(&run.stderr));
    assert!(stdout.contains(" ok"), "{stdout}");
}

use std::ffi::CString;
use std::path::Path;
use std::process::Command;
use std::ptr;

use ikd::model::{checkpoint_save, predict_logits, Head, Model, Structure};
use ikd_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { ikd_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn saved_model(dir: &Path) -> (Model, CString) {
    let model = Model::init("M0", Structure::dense(6, &[5, 4], 3, Head::Softmax), 9).unwrap();
    let path = dir.join("m.ikdp");
    checkpoint_save(&model, &path).unwrap();
    (model, CString::new(path.to_str().unwrap()).unwrap())
}

#[test]
fn model_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = saved_model(dir.path());
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { ikd_model_load(path.as_ptr(), &mut handle) }, IkdStatus::Ok);
    let (mut params, mut classes, mut d) = (0usize, 0usize, 0usize);
    unsafe {
        assert_eq!(ikd_model_param_count(handle, &mut params), IkdStatus::Ok);
        assert_eq!(ikd_model_num_classes(handle, &mut classes), IkdStatus::Ok);
        assert_eq!(ikd_model_input_len(handle, &mut d), IkdStatus::Ok);
    }
    assert_eq!((params, classes, d), (model.param_count(), 3, 6));

    let features: Vec<f32> = (0..2 * 6).map(|i| i as f32 / 12.0).collect();
    let mut logits = vec![0f32; 2 * 3];
    let s = unsafe { ikd_model_forward(handle, features.as_ptr(), 2, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(s, IkdStatus::Ok);
    assert_eq!(logits, predict_logits(&model, &features, 2).unwrap().data());

    let s = unsafe { ikd_model_forward(handle, features.as_ptr(), 2, logits.as_mut_ptr(), 5) };
    assert_eq!(s, IkdStatus::InvalidArgument);
    assert!(last_error().contains("need 6"), "{}", last_error());
    unsafe { ikd_model_free(handle) };
    unsafe { ikd_model_free(ptr::null_mut()) };
}

#[test]
fn load_errors_have_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let mut handle = ptr::null_mut();
    let missing = CString::new(dir.path().join("absent").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ikd_model_load(missing.as_ptr(), &mut handle) }, IkdStatus::Io);
    assert!(last_error().contains("absent"));
    let junk = dir.path().join("junk");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ikd_model_load(junk.as_ptr(), &mut handle) }, IkdStatus::Checkpoint);
    assert!(handle.is_null());
    assert_eq!(unsafe { ikd_model_load(ptr::null(), &mut handle) }, IkdStatus::NullPointer);
    // length query without a buffer
    assert!(unsafe { ikd_last_error_message(ptr::null_mut(), 0) } > 0);
}

#[test]
fn ece_matches_hand_example() {
    // confidences 0.9, 0.8, 0.6 (wrong), 0.55 in 4 bins -> 0.1125
    let probs = [0.9, 0.1, 0.8, 0.2, 0.6, 0.4, 0.55, 0.45];
    let labels = [0usize, 0, 1, 0];
    let mut ece = -1.0;
    assert_eq!(unsafe { ikd_compute_ece(probs.as_ptr(), labels.as_ptr(), 4, 2, 4, &mut ece) }, IkdStatus::Ok);
    assert!((ece - 0.1125).abs() < 1e-12);
    let bad = [0usize, 0, 2, 0];
    assert_eq!(unsafe { ikd_compute_ece(probs.as_ptr(), bad.as_ptr(), 4, 2, 4, &mut ece) }, IkdStatus::InvalidArgument);
    assert_eq!(unsafe { ikd_compute_ece(probs.as_ptr(), labels.as_ptr(), 4, 2, 0, &mut ece) }, IkdStatus::Calibration);
}

#[test]
fn temperature_fit_recovers_scale() {
    // labels drawn from softmax(z); logits handed over scaled by 2.5
    let n = 4000;
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let mut uniform = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let (mut logits, mut labels) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let z: Vec<f64> = (0..3).map(|_| 4.0 * uniform() - 2.0).collect();
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let u = uniform() * s;
        let y = if u < e[0] { 0 } else if u < e[0] + e[1] { 1 } else { 2 };
        labels.push(y);
        logits.extend(z.iter().map(|v| v * 2.5));
    }
    let mut t = 0.0;
    assert_eq!(unsafe { ikd_fit_temperature(logits.as_ptr(), labels.as_ptr(), n, 3, &mut t) }, IkdStatus::Ok);
    assert!((t - 2.5).abs() < 0.25, "{t}");
    assert_eq!(unsafe { ikd_fit_temperature(logits.as_ptr(), labels.as_ptr(), n, 3, ptr::null_mut()) }, IkdStatus::NullPointer);
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"ikd.h\"\nint main(void) { IkdModel *m = 0; size_t n = 0;\n\
         IkdStatus s = ikd_model_num_classes(m, &n); ikd_model_free(m); return s == IKD_STATUS_NULL_POINTER ? 0 : 1; }\n",
    )
    .unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let out = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg("-I")
            .arg(&include)
            .arg(&src)
            .output()
            .unwrap_or_else(|e| panic!("{compiler} not runnable: {e}"));
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

/// Links a C program against the static library and runs it on a real
/// checkpoint.
#[test]
fn c_program_links_and_runs() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let status = Command::new(env!("CARGO"))
        .args(["build", "--quiet", "--profile", "test", "-p", "ikd-ffi", "--lib"])
        .current_dir(manifest)
        .status()
        .expect("cargo runs");
    assert!(status.success());
    let target = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = target.join("libikd_ffi.a");
    assert!(lib.exists(), "{}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let (model, path) = saved_model(dir.path());
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "ikd.h"
int main(int argc, char **argv) {
    IkdModel *m = NULL;
    if (ikd_model_load(argv[1], &m) != IKD_STATUS_OK) { return 3; }
    size_t d = 0, c = 0;
    ikd_model_input_len(m, &d);
    ikd_model_num_classes(m, &c);
    float x[6] = {0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f};
    float z[3];
    if (d != 6 || c != 3 || ikd_model_forward(m, x, 1, z, 3) != IKD_STATUS_OK) { return 4; }
    printf("%.9g %.9g %.9g\n", z[0], z[1], z[2]);
    ikd_model_free(m);
    char msg[64];
    IkdStatus s = ikd_model_load("/nonexistent/model", &m);
    ikd_last_error_message(msg, sizeof msg);
    return s == IKD_STATUS_IO && msg[0] != 0 ? 0 : 5;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let out = Command::new("cc")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).arg(path.to_str().unwrap()).output().unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let printed: Vec<f32> = String::from_utf8(run.stdout).unwrap().split_whitespace().map(|v| v.parse().unwrap()).collect();
    let expected = predict_logits(&model, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 1).unwrap();
    assert_eq!(printed, expected.data());
}

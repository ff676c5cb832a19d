//! Exercise the C entry points from Rust and from a compiled C program.

use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use chandiff_ffi::*;

const TINY: &str = r#"
seed = 1
[schedule]
timesteps = 6
beta_start = 0.01
beta_end = 0.3
[model]
base_width = 8
width_mult = [1, 2]
time_dim = 8
attention = [false, false]
[train]
epochs = 1
batch_size = 8
[data]
classes = 2
per_class = 8
resolution = 8
[sample]
count = 6
batch = 6
runs = [{ mode = "joint" }, { mode = "constant", guide = "bar" }]
[eval]
is_splits = 2
[eval.classifier]
width = 4
feature_dim = 4
epochs = 1
"#;

fn last_error() -> String {
    let p = chd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn config(dir: &Path) -> *mut ChdConfig {
    let text = CString::new(TINY).unwrap();
    let set = CString::new(format!("output_dir=\"{}\"", dir.display())).unwrap();
    let sets = [set.as_ptr()];
    let mut cfg = ptr::null_mut();
    let st = unsafe { chd_config_from_toml(text.as_ptr(), sets.as_ptr(), 1, &mut cfg) };
    assert_eq!(st, ChdStatus::Ok);
    cfg
}

#[test]
fn errors_are_reported_with_codes_and_messages() {
    let mut cfg = ptr::null_mut();
    let bad = CString::new("[model]\nbase_width = \"wide\"").unwrap();
    let st = unsafe { chd_config_from_toml(bad.as_ptr(), ptr::null(), 0, &mut cfg) };
    assert_eq!(st, ChdStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("base_width"));

    let st = unsafe { chd_config_from_toml(ptr::null(), ptr::null(), 0, &mut cfg) };
    assert_eq!(st, ChdStatus::NullPointer);

    let missing = CString::new("/nonexistent/ckpt.jdck").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { chd_model_load(missing.as_ptr(), &mut model) }, ChdStatus::Io);
    assert!(last_error().contains("/nonexistent/ckpt.jdck"));

    let rows = [0.5, 0.6];
    let (mut m, mut s) = (0.0, 0.0);
    assert_eq!(unsafe { chd_inception_score(rows.as_ptr(), 1, 2, 1, &mut m, &mut s) }, ChdStatus::InvalidArgument);
    let rows = [0.0, 1.0, 1.0, 0.0];
    assert_eq!(unsafe { chd_inception_score(rows.as_ptr(), 2, 2, 1, &mut m, &mut s) }, ChdStatus::Ok);
    assert!((m - 2.0).abs() < 1e-12);
    assert!(chd_last_error().is_null());

    let v = unsafe { CStr::from_ptr(chd_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    unsafe {
        chd_config_free(ptr::null_mut());
        chd_model_free(ptr::null_mut());
        chd_report_free(ptr::null_mut());
        chd_string_free(ptr::null_mut());
    }
}

#[test]
fn pipeline_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    unsafe {
        let mut resolved = ptr::null_mut();
        assert_eq!(chd_config_resolved(cfg, &mut resolved), ChdStatus::Ok);
        assert!(CStr::from_ptr(resolved).to_str().unwrap().contains("timesteps = 6"));
        chd_string_free(resolved);

        let mut digest = [0 as std::ffi::c_char; 65];
        assert_eq!(chd_pack(cfg, digest.as_mut_ptr()), ChdStatus::Ok);
        assert_eq!(CStr::from_ptr(digest.as_ptr()).to_bytes().len(), 64);
        let mut loss = f64::NAN;
        assert_eq!(chd_train(cfg, &mut loss), ChdStatus::Ok, "{}", last_error());
        assert!(loss.is_finite());
        assert_eq!(chd_sample(cfg), ChdStatus::Ok);
        let mut report = ptr::null_mut();
        assert_eq!(chd_eval(cfg, &mut report), ChdStatus::Ok, "{}", last_error());
        let (metric, modality) = (CString::new("joint/fid").unwrap(), CString::new("bar").unwrap());
        let mut v = f64::NAN;
        assert_eq!(chd_report_get(report, metric.as_ptr(), modality.as_ptr(), &mut v), ChdStatus::Ok);
        assert!(v >= 0.0);
        let unknown = CString::new("nope").unwrap();
        assert_eq!(chd_report_get(report, unknown.as_ptr(), modality.as_ptr(), &mut v), ChdStatus::InvalidArgument);
        let mut csv = ptr::null_mut();
        assert_eq!(chd_report_csv(report, &mut csv), ChdStatus::Ok);
        assert!(CStr::from_ptr(csv).to_str().unwrap().starts_with("metric,modality,class,value"));
        chd_string_free(csv);
        chd_report_free(report);

        let ckpt = CString::new(dir.path().join("checkpoints/epoch-0001.jdck").to_str().unwrap()).unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(chd_model_load(ckpt.as_ptr(), &mut model), ChdStatus::Ok);
        let (mut c, mut t) = (0usize, 0usize);
        assert_eq!(chd_model_info(model, &mut c, &mut t), ChdStatus::Ok);
        assert_eq!((c, t), (2, 6));

        let x = vec![0.1; 2 * 2 * 8 * 8];
        let mut eps = vec![0.0; x.len()];
        assert_eq!(chd_model_predict_noise(model, x.as_ptr(), 2, 2, 8, 8, [1, 6].as_ptr(), eps.as_mut_ptr()), ChdStatus::Ok);
        assert!(eps.iter().all(|v| v.is_finite()));
        let bad_t = [7usize, 1];
        assert_eq!(
            chd_model_predict_noise(model, x.as_ptr(), 2, 2, 8, 8, bad_t.as_ptr(), eps.as_mut_ptr()),
            ChdStatus::InvalidArgument
        );

        let mut joint = vec![0.0; 3 * 2 * 64];
        assert_eq!(chd_model_sample_joint(model, 3, 8, 8, 9, joint.as_mut_ptr()), ChdStatus::Ok);
        let mut again = vec![0.0; joint.len()];
        chd_model_sample_joint(model, 3, 8, 8, 9, again.as_mut_ptr());
        assert_eq!(joint, again);

        let cond = vec![-1.0; 3 * 64];
        let mut gen = vec![0.0; 3 * 64];
        for scheme in [ChdGuidance::Random, ChdGuidance::Predicted, ChdGuidance::Constant] {
            let st = chd_model_sample_guided(model, scheme, [0usize].as_ptr(), 1, cond.as_ptr(), 3, 8, 8, 4, gen.as_mut_ptr());
            assert_eq!(st, ChdStatus::Ok, "{}", last_error());
            assert!(gen.iter().all(|v| v.is_finite()));
        }
        let st = chd_model_sample_guided(model, ChdGuidance::Random, [5usize].as_ptr(), 1, cond.as_ptr(), 3, 8, 8, 4, gen.as_mut_ptr());
        assert_eq!(st, ChdStatus::InvalidArgument);
        chd_model_free(model);
        chd_config_free(cfg);
    }
}

fn profile_dir() -> PathBuf {
    // target/<profile>/deps/<test binary>
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header() {
    let lib = profile_dir().join("libchandiff_ffi.a");
    if !lib.exists() {
        panic!("static library not found at {}", lib.display());
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "chandiff.h"

int main(void) {
    ChdConfig *cfg = NULL;
    if (chd_config_from_toml("[model]\nbase_width = 0\n", NULL, 0, &cfg) != CHD_STATUS_CONFIG) return 1;
    if (cfg != NULL || chd_last_error() == NULL) return 2;
    if (chd_config_from_toml("seed = 5\n", NULL, 0, &cfg) != CHD_STATUS_OK) return 3;
    char *text = NULL;
    if (chd_config_resolved(cfg, &text) != CHD_STATUS_OK || strstr(text, "seed = 5") == NULL) return 4;
    chd_string_free(text);
    chd_config_free(cfg);
    double rows[4] = {1.0, 0.0, 0.0, 1.0}, mean = 0.0, sd = 0.0;
    if (chd_inception_score(rows, 2, 2, 1, &mean, &sd) != CHD_STATUS_OK || mean < 1.999) return 5;
    printf("ok %s\n", chd_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let cc = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert_eq!(run.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}

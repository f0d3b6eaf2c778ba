use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use fedlora::params::{write_pvec, Block, ParamVector};
use fedlora_ffi::*;

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = fl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn sample_params() -> ParamVector {
    ParamVector::new(vec![
        Block::new("fc.loraA", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        Block::new("fc.loraB", vec![2, 2], vec![-1.0, 0.5, 0.25, 0.0]).unwrap(),
    ])
    .unwrap()
}

#[test]
fn params_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("a.pvec");
    let v = sample_params();
    write_pvec(&src, &v).unwrap();
    unsafe {
        let mut h: *mut FlParams = ptr::null_mut();
        assert_eq!(fl_params_load(cpath(&src).as_ptr(), &mut h), FlStatus::Ok);
        assert_eq!(fl_params_len(h), 10);
        assert_eq!(fl_params_num_blocks(h), 2);
        let mut x = 0.0;
        assert_eq!(fl_params_get(h, 7, &mut x), FlStatus::Ok);
        assert_eq!(x, 0.5);
        assert_eq!(fl_params_get(h, 10, &mut x), FlStatus::OutOfRange);
        let mut buf = vec![0.0; 10];
        assert_eq!(fl_params_copy(h, buf.as_mut_ptr(), 10), FlStatus::Ok);
        assert_eq!(buf, v.to_flat());
        assert_eq!(fl_params_copy(h, buf.as_mut_ptr(), 9), FlStatus::OutOfRange);
        let mut d = 0.0;
        assert_eq!(fl_params_dot(h, h, &mut d), FlStatus::Ok);
        assert_eq!(d, fedlora::params::dot(&v, &v).unwrap());

        let dst = dir.path().join("b.pvec");
        assert_eq!(fl_params_save(h, cpath(&dst).as_ptr()), FlStatus::Ok);
        assert_eq!(std::fs::read(&src).unwrap(), std::fs::read(&dst).unwrap());
        fl_params_free(h);
        fl_params_free(ptr::null_mut());
    }
}

#[test]
fn failures_map_to_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut h: *mut FlParams = ptr::null_mut();
        let missing = dir.path().join("missing.pvec");
        assert_eq!(fl_params_load(cpath(&missing).as_ptr(), &mut h), FlStatus::Io);
        assert!(h.is_null());

        let junk = dir.path().join("junk.pvec");
        std::fs::write(&junk, b"not a container").unwrap();
        assert_eq!(fl_params_load(cpath(&junk).as_ptr(), &mut h), FlStatus::Format);
        assert!(last_error().contains("malformed"));

        assert_eq!(fl_params_load(ptr::null(), &mut h), FlStatus::NullPointer);
        assert_eq!(last_error(), "path is null");
        assert_eq!(fl_params_len(ptr::null()), 0);

        let (mut lf, mut ll) = (0.0, 0.0);
        assert_eq!(fl_optimal_weights(1.0, 2.0, 5.0, &mut lf, &mut ll), FlStatus::Invariant);
        assert_eq!(
            fl_optimal_weights(-1.0, 2.0, 0.0, &mut lf, &mut ll),
            FlStatus::InvalidArgument
        );
        assert_eq!(
            fl_optimal_weights(1.0, 2.0, 0.0, ptr::null_mut(), &mut ll),
            FlStatus::NullPointer
        );

        let (mut per, mut total) = (0, 0);
        assert_eq!(
            fl_ledger_predict(9, 1, 1, 1, 1, 1, &mut per, &mut total),
            FlStatus::InvalidArgument
        );
        assert!(last_error().contains("unknown strategy 9"));

        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, r#"{"model": {"rank": 0}}"#).unwrap();
        assert_eq!(fl_run_experiment(cpath(&bad).as_ptr(), ptr::null()), FlStatus::Config);
    }
}

#[test]
fn weights_and_ledger_match_the_core_library() {
    unsafe {
        let (mut lf, mut ll) = (0.0, 0.0);
        assert_eq!(fl_optimal_weights(1.0, 3.0, 0.5, &mut lf, &mut ll), FlStatus::Ok);
        let w = fedlora::merge::optimal_weights(1.0, 3.0, 0.5).unwrap();
        assert_eq!((lf, ll), (w.lambda_fedit, w.lambda_local));
        assert_eq!(lf, 2.5 / 3.0);

        let (mut per, mut total) = (0, 0);
        assert_eq!(
            fl_ledger_predict(FL_STRATEGY_FEDSA, 8, 768, 768, 1, 1, &mut per, &mut total),
            FlStatus::Ok
        );
        assert_eq!(24 * per, 589_824);
        let mut sum = 0;
        for s in [FL_STRATEGY_FEDSA, FL_STRATEGY_FFA_LORA] {
            fl_ledger_predict(s, 4, 10, 6, 3, 5, &mut per, &mut total);
            sum += total;
        }
        fl_ledger_predict(FL_STRATEGY_FEDIT, 4, 10, 6, 3, 5, &mut per, &mut total);
        assert_eq!(sum, total);
        assert_eq!(total, 4 * 4 * 16 * 3 * 5);
        fl_ledger_predict(FL_STRATEGY_LOCAL, 4, 10, 6, 3, 5, &mut per, &mut total);
        assert_eq!(total, 0);
    }
}

#[test]
fn runs_an_experiment_into_the_given_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{
            "partition": {"mode": {"kind": "distinct_tasks", "tasks": [{"kind": "identity"}, {"kind": "rotation", "degrees": 30}]},
                          "n_clients": 2, "samples_per_client_train": 16, "samples_per_client_test": 10},
            "pretrain": {"steps": 10},
            "federated": {"rounds": 2, "fedit_round": 2, "local_rounds": 2, "strategies": ["fedit", "local"]},
            "write_checkpoints": false
        }"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let status = unsafe { fl_run_experiment(cpath(&cfg).as_ptr(), cpath(&out).as_ptr()) };
    assert_eq!(status, FlStatus::Ok);
    let summary = fedlora::experiment::load_summary(out.join("summary.json")).unwrap();
    assert!(summary.method("merged(2)").is_some());
}

#[test]
fn version_matches_the_package() {
    let v = unsafe { CStr::from_ptr(fl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn static_lib() -> Option<PathBuf> {
    let deps = std::env::current_exe().ok()?.parent()?.to_path_buf();
    let lib = deps.parent()?.join("libfedlora_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn header_compiles_and_links_from_c() {
    let Some(lib) = static_lib() else {
        eprintln!("static library not built; skipping C link check");
        return;
    };
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "fedlora.h"
int main(void) {
    double lf, ll;
    uint64_t per, total;
    if (fl_optimal_weights(1.0, 3.0, 0.5, &lf, &ll) != FL_STATUS_OK) return 1;
    if (fl_ledger_predict(FL_STRATEGY_FEDIT, 2, 4, 8, 1, 1, &per, &total) != FL_STATUS_OK) return 2;
    if (per != 96) return 3;
    FlParams *p = NULL;
    if (fl_params_load("/nonexistent.pvec", &p) != FL_STATUS_IO || fl_last_error() == NULL) return 4;
    printf("%.6f %.6f %s\n", lf, ll, fl_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status();
    let Ok(status) = status else {
        eprintln!("no C compiler; skipping C link check");
        return;
    };
    assert!(status.success(), "C smoke program failed to build");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("0.833333 0.166667 "), "{text}");
}

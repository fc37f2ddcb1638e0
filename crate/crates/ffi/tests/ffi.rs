use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use proxq_ffi::*;

fn last_error() -> String {
    let p = proxq_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn projection_and_prox() {
    let q = [1.0, 0.0, 2.0, 1.0, 3.0];
    let mut out = [0.0; 5];
    unsafe {
        assert_eq!(
            proxq_project_monotone(q.as_ptr(), out.as_mut_ptr()),
            ProxqStatus::Ok
        );
        assert_eq!(out, [0.5, 0.5, 1.5, 1.5, 3.0]);
        assert!(proxq_last_error().is_null());
        let mut prox = [0.0; 5];
        assert_eq!(
            proxq_prox_monotone(q.as_ptr(), 1e6, 1e-10, prox.as_mut_ptr()),
            ProxqStatus::Ok
        );
        for a in 0..5 {
            assert!((prox[a] - out[a]).abs() < 1e-3);
        }
        let mut c = -1.0;
        assert_eq!(
            proxq_monotone_penalty(out.as_ptr(), &mut c),
            ProxqStatus::Ok
        );
        assert_eq!(c, 0.0);
        assert_eq!(proxq_monotone_penalty(q.as_ptr(), &mut c), ProxqStatus::Ok);
        assert!(c > 0.0);
    }
}

#[test]
fn errors_are_reported() {
    let mut out = [0.0; 5];
    let bad = [f64::NAN, 0.0, 0.0, 0.0, 0.0];
    unsafe {
        assert_eq!(
            proxq_project_monotone(ptr::null(), out.as_mut_ptr()),
            ProxqStatus::NullPointer
        );
        assert!(last_error().contains("null"));
        assert_eq!(
            proxq_project_monotone(bad.as_ptr(), out.as_mut_ptr()),
            ProxqStatus::Domain
        );
        assert_eq!(
            proxq_prox_monotone(out.as_ptr(), -1.0, 1e-10, out.as_mut_ptr()),
            ProxqStatus::Domain
        );
        let mut v = 0.0;
        assert_eq!(proxq_click_prob(2.0, 0.3, 0.5, &mut v), ProxqStatus::Domain);
        assert!(last_error().contains("outside"));
        assert_eq!(proxq_bid(7, &mut v), ProxqStatus::Domain);
        // a later success clears the message
        assert_eq!(proxq_bid(2, &mut v), ProxqStatus::Ok);
        assert_eq!(v, 0.5);
        assert!(proxq_last_error().is_null());
    }
}

#[test]
fn environment_values() {
    let mut p = 0.0;
    let mut v = 0.0;
    unsafe {
        assert_eq!(proxq_click_prob(0.0, 0.3, 0.0, &mut p), ProxqStatus::Ok);
        assert_eq!(p, 0.5);
        assert_eq!(proxq_click_prob(1.0, 0.3, 1.0, &mut p), ProxqStatus::Ok);
        assert!((p - 0.924_141_82).abs() < 1e-8);
        assert_eq!(proxq_optimal_value(0.0, 0.2, &mut v), ProxqStatus::Ok);
        assert!((v - (proxq::env::sigmoid(2.0) - 0.2)).abs() < 1e-15);
    }
}

#[test]
fn dataset_and_agent_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("d.jsonl").to_str().unwrap()).unwrap();
    unsafe {
        let mut data = ptr::null_mut();
        assert_eq!(proxq_dataset_generate(300, 4, &mut data), ProxqStatus::Ok);
        let mut n = 0;
        assert_eq!(proxq_dataset_len(data, &mut n), ProxqStatus::Ok);
        assert_eq!(n, 300);
        assert_eq!(proxq_dataset_save(data, path.as_ptr()), ProxqStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(
            proxq_dataset_load(path.as_ptr(), &mut loaded),
            ProxqStatus::Ok
        );
        let mut m = 0;
        assert_eq!(proxq_dataset_len(loaded, &mut m), ProxqStatus::Ok);
        assert_eq!(m, 300);

        let cfg =
            CString::new(r#"{"steps":20,"batch_size":16,"hidden":[8],"eval_every":0}"#).unwrap();
        let mut agent = ptr::null_mut();
        assert_eq!(
            proxq_agent_train(
                ProxqAgentKind::ConstraintAware,
                loaded,
                cfg.as_ptr(),
                &mut agent
            ),
            ProxqStatus::Ok,
            "{}",
            last_error()
        );
        let mut row = [0.0; 5];
        assert_eq!(
            proxq_agent_q_row(agent, 0.3, 0.25, row.as_mut_ptr()),
            ProxqStatus::Ok
        );
        assert!(row.windows(2).all(|w| w[0] <= w[1]));
        let mut probs = [0.0; 5];
        assert_eq!(
            proxq_agent_policy(agent, 0.3, 0.25, probs.as_mut_ptr()),
            ProxqStatus::Ok
        );
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut errors = 99;
        assert_eq!(
            proxq_agent_monotonicity_errors(agent, &mut errors),
            ProxqStatus::Ok
        );
        assert_eq!(errors, 0);

        let bad = CString::new(r#"{"stepz":20}"#).unwrap();
        let mut other = ptr::null_mut();
        assert_eq!(
            proxq_agent_train(ProxqAgentKind::Iql, loaded, bad.as_ptr(), &mut other),
            ProxqStatus::Config
        );
        assert!(other.is_null());

        let missing = CString::new("/nonexistent/x.jsonl").unwrap();
        assert_eq!(
            proxq_dataset_load(missing.as_ptr(), &mut other as *mut _ as *mut _),
            ProxqStatus::Io
        );

        proxq_agent_free(agent);
        proxq_dataset_free(loaded);
        proxq_dataset_free(data);
        proxq_dataset_free(ptr::null_mut());
    }
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include").join("proxq.h");
    assert!(header.exists(), "generated header missing");
    let lib = target_dir().join("libproxq_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "proxq.h"
int main(void) {
    double q[PROXQ_N_ACTIONS] = {1.0, 0.0, 2.0, 1.0, 3.0};
    double out[PROXQ_N_ACTIONS];
    if (proxq_project_monotone(q, out) != PROXQ_STATUS_OK) return 1;
    if (proxq_project_monotone(NULL, out) != PROXQ_STATUS_NULL_POINTER) return 2;
    if (proxq_last_error() == NULL) return 3;
    ProxqDataset *d = NULL;
    if (proxq_dataset_generate(10, 1, &d) != PROXQ_STATUS_OK) return 4;
    size_t n = 0;
    proxq_dataset_len(d, &n);
    proxq_dataset_free(d);
    printf("%.2f %.2f %zu\n", out[0], out[4], n);
    return n == 10 ? 0 : 5;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("a C compiler named cc");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.50 3.00 10");
}

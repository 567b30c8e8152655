use std::ffi::{CStr, CString};
use std::os::raw::{c_char, c_int};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use selfner::corpus::{AnnotatedSample, Sample};
use selfner::prompting::build_zero_shot_prompt;
use selfner::LabelSet;
use selfner_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take(p: *mut c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_string();
    selfner_string_free(p);
    s
}

unsafe fn last_error() -> String {
    let p = selfner_last_error();
    assert!(!p.is_null());
    CStr::from_ptr(p).to_str().unwrap().to_string()
}

#[test]
fn parse_answer_reports_pairs_and_status() {
    unsafe {
        let mut out = ptr::null_mut();
        let mut status: c_int = -1;
        let raw = c("Sure: [{'Baghdad': 'Geo-Political Entity'}]");
        assert_eq!(selfner_parse_answer(raw.as_ptr(), &mut out, &mut status), SelfnerStatus::Ok);
        assert_eq!(take(out), r#"[["Baghdad","Geo-Political Entity"]]"#);
        assert_eq!(status, 1);

        let raw = c("nothing here");
        assert_eq!(selfner_parse_answer(raw.as_ptr(), &mut out, &mut status), SelfnerStatus::Ok);
        assert_eq!(take(out), "[]");
        assert_eq!(status, 2);
    }
}

#[test]
fn null_arguments_set_the_last_error() {
    unsafe {
        let mut out = ptr::null_mut();
        let mut status: c_int = 0;
        assert_eq!(
            selfner_parse_answer(ptr::null(), &mut out, &mut status),
            SelfnerStatus::NullArgument
        );
        assert!(last_error().contains("raw"));
        assert!(out.is_null());
        selfner_string_free(ptr::null_mut());
        selfner_pool_free(ptr::null_mut());
    }
}

#[test]
fn prompts_match_the_library() {
    unsafe {
        let text = "John Irvine , ITV News , Baghdad .";
        let mut out = ptr::null_mut();
        assert_eq!(selfner_zero_shot_prompt(ptr::null(), c(text).as_ptr(), &mut out), SelfnerStatus::Ok);
        assert_eq!(take(out), build_zero_shot_prompt(&LabelSet::ace05(), text));

        let empty = c("[]");
        assert_eq!(
            selfner_icl_prompt(ptr::null(), empty.as_ptr(), c(text).as_ptr(), &mut out),
            SelfnerStatus::Ok
        );
        assert_eq!(take(out), build_zero_shot_prompt(&LabelSet::ace05(), text));

        let bad = c("{");
        assert_eq!(
            selfner_icl_prompt(ptr::null(), bad.as_ptr(), c(text).as_ptr(), &mut out),
            SelfnerStatus::InvalidJson
        );
    }
}

#[test]
fn micro_f1_round_trips_json() {
    unsafe {
        let preds = c(r#"[["a", [["X","Person"],["Y","Location"]]]]"#);
        let golds = c(r#"[["a", [["X","Person"]]]]"#);
        let mut out = ptr::null_mut();
        assert_eq!(selfner_micro_f1(preds.as_ptr(), golds.as_ptr(), &mut out), SelfnerStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(v["tp"], 1);
        assert_eq!(v["fp"], 1);
        assert_eq!(v["fn"], 0);
        assert_eq!(v["precision"], 0.5);

        let other = c(r#"[["b", []]]"#);
        assert_eq!(selfner_micro_f1(preds.as_ptr(), other.as_ptr(), &mut out), SelfnerStatus::DataError);
        assert!(last_error().contains("do not align"));
    }
}

fn pool_file(dir: &std::path::Path) -> PathBuf {
    let samples: Vec<AnnotatedSample> = (0..5)
        .map(|i| {
            let s = Sample::new(format!("p{i}"), format!("Alice visited Paris on day {i} .")).with_gold([("Alice", "Person")]);
            AnnotatedSample::from_gold(&s, 5).unwrap()
        })
        .collect();
    let path = dir.join("pool.jsonl");
    let text: String = samples
        .iter()
        .map(|s| serde_json::to_string(s).unwrap() + "\n")
        .collect();
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn pool_handle_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let path = c(pool_file(dir.path()).to_str().unwrap());
    unsafe {
        let mut pool = ptr::null_mut();
        assert_eq!(selfner_pool_open(path.as_ptr(), ptr::null(), &mut pool), SelfnerStatus::Ok);
        let mut len = 0usize;
        assert_eq!(selfner_pool_len(pool, &mut len), SelfnerStatus::Ok);
        assert_eq!(len, 5);

        let policy = c(r#"{"kind":"nearest","k":3,"big_k":50,"seed":0}"#);
        let query = c("Alice visited Paris on day 3 .");
        let mut out = ptr::null_mut();
        assert_eq!(
            selfner_pool_retrieve(pool, query.as_ptr(), policy.as_ptr(), &mut out),
            SelfnerStatus::Ok
        );
        let ids: Vec<String> = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(ids[0], "p3");

        let bad = c(r#"{"kind":"nearest","k":0,"big_k":50,"seed":0}"#);
        assert_eq!(
            selfner_pool_retrieve(pool, query.as_ptr(), bad.as_ptr(), &mut out),
            SelfnerStatus::ConfigError
        );
        selfner_pool_free(pool);

        let missing = c("/nonexistent/pool.jsonl");
        assert_eq!(selfner_pool_open(missing.as_ptr(), ptr::null(), &mut pool), SelfnerStatus::DataError);
    }
}

/// Compile and run a small C program against the generated header and the
/// static library, when a C compiler is available.
#[test]
fn c_program_links_against_the_header() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    let exe = std::env::current_exe().unwrap();
    let target_dir = exe.parent().and_then(|p| p.parent()).unwrap().to_path_buf();
    let lib = target_dir.join("libselfner_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "selfner.h"

int main(void) {
    char *out = NULL;
    int status = -1;
    if (selfner_parse_answer("[{'Paris': 'Location'}]", &out, &status) != SELFNER_STATUS_OK) return 1;
    if (strcmp(out, "[[\"Paris\",\"Location\"]]") != 0 || status != 0) return 2;
    selfner_string_free(out);
    if (selfner_parse_answer(NULL, &out, &status) != SELFNER_STATUS_NULL_ARGUMENT) return 3;
    if (selfner_last_error() == NULL) return 4;
    printf("ok\n");
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let build = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout), "ok\n");
}

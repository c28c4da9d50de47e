//! Compiles and runs a small C program against the generated header and
//! the static library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include "kcache.h"

int main(void) {
    uint64_t bytes = 0;
    if (kc_kv_cache_bytes(8, 32768, 4096, 32, 2, &bytes) != KC_STATUS_OK) return 1;
    if (bytes != 137438953472ULL) return 2;

    KcModel *model = NULL;
    if (kc_model_generate("toy", 5, &model) != KC_STATUS_OK) return 3;
    KcRunConfig cfg;
    kc_run_config_default(&cfg);
    cfg.prompt_len = 8;
    cfg.gen_len = 4;
    cfg.mode = KC_MODE_KCACHE;
    cfg.top_n = 2;
    KcReport *report = NULL;
    if (kc_generate(model, &cfg, &report) != KC_STATUS_OK) return 4;
    uint32_t toks[8];
    size_t len = 0;
    if (kc_report_tokens(report, 0, toks, 8, &len) != KC_STATUS_OK || len != 4) return 5;

    cfg.mode = 9;
    KcReport *bad = NULL;
    if (kc_generate(model, &cfg, &bad) != KC_STATUS_ARGUMENT) return 6;
    printf("%s\n", kc_last_error_message());

    kc_report_free(report);
    kc_model_free(model);
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let test_exe = std::env::current_exe().unwrap();
    let profile_dir = test_exe.parent().and_then(|p| p.parent()).unwrap();
    let lib = profile_dir.join("libkcache_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let exe = dir.path().join("smoke");
    std::fs::write(&src, PROGRAM).unwrap();
    let out = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "cc failed: {}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert!(String::from_utf8_lossy(&run.stdout).contains("unknown mode"));
}

//! Compiles and runs a small C program against the generated header and the
//! static library.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "glucose_mpc.h"

int main(void) {
    GmPatient *p = NULL;
    if (gm_patient_new_nominal(1, &p) != GM_STATUS_OK) return 10;
    double basal = 0.0, g0 = 0.0, g = 0.0;
    gm_patient_operating_point(p, &basal, &g0);
    GmController *c = NULL;
    if (gm_controller_new_arx(NULL, g0, basal, &c) != GM_STATUS_OK) return 11;
    g = g0;
    for (uint32_t k = 0; k < 40; k++) {
        GmTick t;
        double carbs = k == 30 ? 50.0 : 0.0;
        if (gm_controller_step(c, k * 15, g, carbs, &t) != GM_STATUS_OK) return 12;
        if (t.command_u < 0.0 || t.command_u > 25.0) return 13;
        if (gm_patient_step(p, t.command_u, carbs, 15.0, &g) != GM_STATUS_OK) return 14;
    }
    gm_controller_free(c);
    gm_patient_free(p);
    if (gm_patient_step(NULL, 1.0, 0.0, 15.0, &g) != GM_STATUS_NULL_POINTER) return 15;
    if (gm_last_error()[0] == '\0') return 16;

    double a[10], b[10], tt, pp;
    for (int i = 0; i < 10; i++) { a[i] = i + 1; b[i] = 0.0; }
    if (gm_paired_t_test(a, b, 10, &tt, &pp) != GM_STATUS_OK) return 17;
    if (fabs(tt - 5.7446) > 1e-3) return 18;
    printf("ok %s\n", gm_version());
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // tests run from <target>/<profile>/deps/<test-binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(
        header_dir.join("glucose_mpc.h").exists(),
        "header not generated"
    );
    let lib = target_dir().join("libglucose_mpc_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());

    let work = tempfile::tempdir().unwrap();
    let src = work.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let bin = work.path().join("main");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let out = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header_dir)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&bin)
        .output()
        .expect("C compiler not available");
    assert!(
        out.status.success(),
        "compile failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = Command::new(&bin).output().unwrap();
    assert!(
        run.status.success(),
        "C program exited with {:?}",
        run.status.code()
    );
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}

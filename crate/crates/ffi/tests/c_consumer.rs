//! Builds a small C program against the generated header and the static
//! library, then runs it.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "consisaug.h"

#define CHECK(call) do { enum CsgStatus s_ = (call); if (s_ != CSG_STATUS_OK) { \
    char m_[512]; csg_last_error_message(m_, sizeof m_); \
    fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_, m_); return 1; } } while (0)

int main(int argc, char **argv) {
    const char *root = argv[1];
    char data[1024], train[1024], ckpt[1024], config[4096];
    snprintf(data, sizeof data, "%s/data", root);
    snprintf(train, sizeof train, "%s/data/train", root);
    snprintf(ckpt, sizeof ckpt, "%s/run/last.ckpt", root);

    double f1 = 0, f2 = 0;
    CHECK(csg_f_scores(0.575, 0.453, &f1, &f2));
    if (f1 < 0.506 || f1 > 0.507) return 2;

    CHECK(csg_generate_data(data, "a", 4, 2, 2, 64, 3));
    struct CsgDataset *ds = NULL;
    CHECK(csg_dataset_load(train, &ds));
    if (csg_dataset_len(ds) != 4) return 3;

    snprintf(config, sizeof config,
             "data_dir = %s\nout_dir = %s/run\nmode = consis_flipaug\nepochs = 1\n"
             "warmup_epochs = 0\nbatch_size = 2\n", data, root);
    struct CsgModel *model = NULL;
    CHECK(csg_train(config, &model));
    if (csg_model_epoch(model) != 1 || csg_model_image_size(model) != 64) return 4;

    struct CsgModel *loaded = NULL;
    CHECK(csg_model_load(ckpt, &loaded));
    struct CsgMetrics a, b;
    CHECK(csg_evaluate(model, ds, 0, 0.25, 0.45, &a));
    CHECK(csg_evaluate(loaded, ds, 0, 0.25, 0.45, &b));
    if (memcmp(&a, &b, sizeof a) != 0) return 5;

    unsigned char rgb[64 * 64 * 3] = {0};
    struct CsgDetection dets[8];
    size_t count = 0;
    CHECK(csg_predict(model, rgb, 64, 64, 0.0, 0.45, dets, 8, &count));

    struct CsgModel *missing = NULL;
    if (csg_model_load("/nonexistent/x.ckpt", &missing) != CSG_STATUS_IO) return 6;
    if (csg_last_error_message(NULL, 0) == 0) return 7;
    if (csg_dataset_load(NULL, &ds) != CSG_STATUS_NULL_POINTER) return 8;

    csg_model_free(loaded);
    csg_model_free(model);
    csg_dataset_free(ds);
    printf("ok %s\n", csg_version());
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // The test binary lives in target/<profile>/deps next to the library;
    // `cargo build` also copies it up to target/<profile>.
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib = [deps.clone(), deps.parent().unwrap().to_path_buf()]
        .into_iter()
        .map(|d| d.join("libconsisaug_ffi.a"))
        .find(|p| p.exists())
        .expect("static library next to the test binary");

    let t = tempfile::tempdir().unwrap();
    let src = t.path().join("main.c");
    let exe = t.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let build = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));

    let run = Command::new(&exe).arg(t.path()).env("RUST_LOG", "off").output().unwrap();
    assert!(
        run.status.success(),
        "exit {:?}: {}",
        run.status.code(),
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}

//! End-to-end tests of the `camforge` binary: workflows, file outputs, and
//! exit codes (0 ok, 1 usage, 2 I/O or format, 3 failed check).

use std::path::Path;
use std::process::{Command, Output};

use camforge_core::postproc::netpbm::write_image;
use camforge_core::postproc::{Image, Provenance};
use camforge_core::rng::SplitMix64;

fn camforge(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camforge"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn camforge_env(args: &[&str], dir: &Path, key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camforge"))
        .args(args)
        .env(key, value)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_dataset(dir: &Path, seed: u64, count: usize) {
    let mut rng = SplitMix64::new(seed);
    let mut index = String::from("filename,label\n");
    for i in 0..count {
        let data: Vec<f64> = (0..256).map(|_| (rng.next_u64() >> 56) as f64 / 255.0).collect();
        let img = Image::new(1, 16, 16, data, Provenance::Synthetic(seed)).unwrap();
        let name = format!("img_{i:02}.pgm");
        write_image(&img, &dir.join(&name)).unwrap();
        index.push_str(&format!("{name},{}\n", i % 10));
    }
    std::fs::write(dir.join("index.csv"), index).unwrap();
}

#[test]
fn gen_model_is_deterministic_and_validates_arch() {
    let dir = tempfile::tempdir().unwrap();
    let a = camforge(&["gen-model", "--seed", "42", "--arch", "tiny", "--out", "a.camf"], dir.path());
    assert_exit(&a, 0);
    let b = camforge(&["gen-model", "--seed", "42", "--arch", "tiny", "--out", "b.camf"], dir.path());
    assert_exit(&b, 0);
    assert_eq!(
        std::fs::read(dir.path().join("a.camf")).unwrap(),
        std::fs::read(dir.path().join("b.camf")).unwrap()
    );
    let bad = camforge(&["gen-model", "--seed", "1", "--arch", "huge", "--out", "c.camf"], dir.path());
    assert_exit(&bad, 1);
}

#[test]
fn attribute_writes_a_heatmap_at_image_resolution() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 5, 1);
    assert_exit(&camforge(&["gen-model", "--seed", "42", "--arch", "tiny", "--out", "m.camf"], dir.path()), 0);
    let out = camforge(
        &[
            "attribute", "--model", "m.camf", "--image", "img_00.pgm", "--layer", "4",
            "--class", "argmax", "--method", "gradcam-pp", "--score", "post",
            "--out", "heat.pgm", "--overlay", "over.ppm",
        ],
        dir.path(),
    );
    assert_exit(&out, 0);
    let heat = std::fs::read(dir.path().join("heat.pgm")).unwrap();
    assert!(heat.starts_with(b"P5\n16 16\n255\n"), "heatmap matches the input dimensions");
    assert_eq!(heat.len(), b"P5\n16 16\n255\n".len() + 256);
    let over = std::fs::read(dir.path().join("over.ppm")).unwrap();
    assert!(over.starts_with(b"P6\n16 16\n255\n"));
}

#[test]
fn explicit_argmax_class_matches_the_argmax_keyword() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 6, 1);
    assert_exit(&camforge(&["gen-model", "--seed", "42", "--arch", "tiny", "--out", "m.camf"], dir.path()), 0);
    let explain = camforge(
        &[
            "explain", "--model", "m.camf", "--image", "img_00.pgm", "--layer", "4",
            "--class", "argmax", "--method", "gradcam", "--score", "post",
            "--out", "h1.pgm", "--explanation", "e.pgm",
        ],
        dir.path(),
    );
    assert_exit(&explain, 0);
    let stdout = String::from_utf8(explain.stdout).unwrap();
    let class: usize = stdout
        .split("(class ")
        .nth(1)
        .and_then(|s| s.split(')').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(stdout.contains("re-fed post-softmax score"));
    assert!(dir.path().join("e.pgm").exists());

    let by_index = camforge(
        &[
            "attribute", "--model", "m.camf", "--image", "img_00.pgm", "--layer", "4",
            "--class", &class.to_string(), "--method", "gradcam", "--score", "post",
            "--out", "h2.pgm",
        ],
        dir.path(),
    );
    assert_exit(&by_index, 0);
    assert_eq!(
        std::fs::read(dir.path().join("h1.pgm")).unwrap(),
        std::fs::read(dir.path().join("h2.pgm")).unwrap()
    );
}

#[test]
fn evaluate_writes_reports_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 7, 6);
    assert_exit(&camforge(&["gen-model", "--seed", "42", "--arch", "tiny", "--out", "m.camf"], dir.path()), 0);
    let json = camforge(
        &[
            "evaluate", "--model", "m.camf", "--dataset", ".", "--methods",
            "gradcam,gradcam-plus,gradcam-pp", "--confidence", "0", "--score", "post",
            "--report", "r.json",
        ],
        dir.path(),
    );
    assert_exit(&json, 0);
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(parsed["pairs"].as_array().unwrap().len(), 3);
    assert_eq!(parsed["sample_count"].as_u64().unwrap(), 6);

    let csv = camforge(
        &[
            "evaluate", "--model", "m.camf", "--dataset", ".", "--methods",
            "gradcam,gradcam-plus,gradcam-pp", "--confidence", "0", "--score", "post",
            "--report", "r.csv",
        ],
        dir.path(),
    );
    assert_exit(&csv, 0);
    let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(text.lines().count(), 4, "header plus three pairs");

    let bad = camforge(
        &[
            "evaluate", "--model", "m.camf", "--dataset", ".", "--methods", "gradcam",
            "--confidence", "0", "--score", "post", "--report", "r.xml",
        ],
        dir.path(),
    );
    assert_exit(&bad, 1);
}

#[test]
fn evaluate_is_deterministic_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 8, 8);
    assert_exit(&camforge(&["gen-model", "--seed", "42", "--arch", "tiny", "--out", "m.camf"], dir.path()), 0);
    let args = [
        "evaluate", "--model", "m.camf", "--dataset", ".", "--methods",
        "gradcam,gradcam-pp", "--confidence", "0", "--score", "post", "--report", "r1.json",
    ];
    assert_exit(&camforge_env(&args, dir.path(), "CAMFORGE_THREADS", "1"), 0);
    let mut args2 = args;
    args2[args.len() - 1] = "r2.json";
    assert_exit(&camforge_env(&args2, dir.path(), "CAMFORGE_THREADS", "4"), 0);
    assert_eq!(
        std::fs::read(dir.path().join("r1.json")).unwrap(),
        std::fs::read(dir.path().join("r2.json")).unwrap()
    );
}

#[test]
fn alpha_stats_writes_a_histogram_that_sums_to_the_nonzero_count() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 9, 4);
    assert_exit(&camforge(&["gen-model", "--seed", "42", "--arch", "tiny", "--out", "m.camf"], dir.path()), 0);
    let out = camforge(
        &["alpha-stats", "--model", "m.camf", "--dataset", ".", "--layer", "4", "--out", "s.json"],
        dir.path(),
    );
    assert_exit(&out, 0);
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    let total: u64 = stats["tanh_histogram"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, stats["nonzero_count"].as_u64().unwrap());
}

#[test]
fn checks_pass_on_a_sound_model_and_report_their_results() {
    let dir = tempfile::tempdir().unwrap();
    assert_exit(&camforge(&["gen-model", "--seed", "42", "--arch", "tiny", "--out", "m.camf"], dir.path()), 0);
    let grad = camforge(&["check-grad", "--model", "m.camf", "--tol", "1e-4"], dir.path());
    assert_exit(&grad, 0);
    assert!(String::from_utf8_lossy(&grad.stdout).contains("PASS"));

    let deriv = camforge(
        &["check-derivation", "--model", "m.camf", "--seed", "7", "--out", "audit.json"],
        dir.path(),
    );
    assert_exit(&deriv, 0);
    let audit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("audit.json")).unwrap()).unwrap();
    assert_eq!(audit["pass"], serde_json::Value::Bool(true));
    assert_eq!(audit["corrected_identity"]["probes"].as_array().unwrap().len(), 8);
}

#[test]
fn io_and_format_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 10, 1);
    let missing = camforge(
        &[
            "attribute", "--model", "nope.camf", "--image", "img_00.pgm", "--layer", "4",
            "--class", "argmax", "--method", "gradcam", "--score", "post", "--out", "h.pgm",
        ],
        dir.path(),
    );
    assert_exit(&missing, 2);

    std::fs::write(dir.path().join("bad.camf"), b"XXXX rest does not matter").unwrap();
    let corrupt = camforge(
        &[
            "attribute", "--model", "bad.camf", "--image", "img_00.pgm", "--layer", "4",
            "--class", "argmax", "--method", "gradcam", "--score", "post", "--out", "h.pgm",
        ],
        dir.path(),
    );
    assert_exit(&corrupt, 2);
}

#[test]
fn usage_errors_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let unknown_flag = camforge(&["gen-model", "--seeds", "1"], dir.path());
    assert_exit(&unknown_flag, 1);
    let unknown_sub = camforge(&["frobnicate"], dir.path());
    assert_exit(&unknown_sub, 1);

    write_dataset(dir.path(), 11, 1);
    assert_exit(&camforge(&["gen-model", "--seed", "1", "--arch", "tiny", "--out", "m.camf"], dir.path()), 0);
    let bad_method = camforge(
        &[
            "attribute", "--model", "m.camf", "--image", "img_00.pgm", "--layer", "4",
            "--class", "argmax", "--method", "score-cam", "--score", "post", "--out", "h.pgm",
        ],
        dir.path(),
    );
    assert_exit(&bad_method, 1);
    let bad_layer = camforge(
        &[
            "attribute", "--model", "m.camf", "--image", "img_00.pgm", "--layer", "99",
            "--class", "argmax", "--method", "gradcam", "--score", "post", "--out", "h.pgm",
        ],
        dir.path(),
    );
    assert_exit(&bad_layer, 1);
}

mod common;

use std::path::Path;
use std::process::Command;

use setfuse::correspondence::PatchNccMatcher;
use setfuse::pipeline::{generate_set, load_config, run, sha256_hex, RunManifest, Stage, Timings};

fn write_inputs(dir: &Path, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for k in 0..n {
        common::disc_image(64, k as i32 * 4 - 4).save(dir.join(format!("{k:02}.png"))).unwrap();
    }
}

fn write_config(root: &Path, extra: &str) -> std::path::PathBuf {
    let path = root.join("run.toml");
    let body = format!(
        "input_dir = \"in\"\noutput_dir = \"out\"\nwidth = 64\nheight = 64\nrun_id = \"r\"\n{extra}\n[prompts]\nshared = \"a red ball\"\ntheme = \"watercolor\"\n"
    );
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn run_writes_a_complete_reproducible_directory() {
    let root = tempfile::tempdir().unwrap();
    write_inputs(&root.path().join("in"), 3);
    let cfg = load_config(&write_config(root.path(), "")).unwrap();
    let manifest = run(&cfg, &PatchNccMatcher::default(), None).unwrap();
    let dir = root.path().join("out/r");
    assert_eq!(manifest.outputs.len(), 3);
    for o in &manifest.outputs {
        assert_eq!(sha256_hex(&std::fs::read(dir.join(&o.file)).unwrap()), o.sha256);
    }
    let on_disk = RunManifest::read(&dir.join("manifest.json")).unwrap();
    assert_eq!(on_disk, manifest);
    let timings: Timings = serde_json::from_str(&std::fs::read_to_string(dir.join("timings.json")).unwrap()).unwrap();
    assert!(timings.total > 0.0);
    assert!(!dir.join("FAILED").exists());
    assert!(root.path().join("in/.setfuse-cache").is_dir());

    let first = std::fs::read(dir.join("manifest.json")).unwrap();
    run(&cfg, &PatchNccMatcher::default(), None).unwrap();
    assert_eq!(std::fs::read(dir.join("manifest.json")).unwrap(), first);
}

#[test]
fn unavailable_backend_leaves_a_failed_marker() {
    let root = tempfile::tempdir().unwrap();
    write_inputs(&root.path().join("in"), 2);
    let cfg = load_config(&write_config(root.path(), "backend = \"dit\"")).unwrap();
    let err = run(&cfg, &PatchNccMatcher::default(), None).unwrap_err().to_string();
    let marker = std::fs::read_to_string(root.path().join("out/r/FAILED")).unwrap();
    assert!(err.contains("dit"), "{err}");
    assert!(marker.contains("backend"), "{marker}");
}

#[test]
fn edit_mode_needs_source_captions() {
    let root = tempfile::tempdir().unwrap();
    write_inputs(&root.path().join("in"), 2);
    let cfg = load_config(&write_config(root.path(), "mode = \"edit\"")).unwrap();
    let err = run(&cfg, &PatchNccMatcher::default(), None).unwrap_err().to_string();
    assert!(err.contains("source_captions"), "{err}");

    let path = write_config(root.path(), "mode = \"edit\"");
    let mut body = std::fs::read_to_string(&path).unwrap();
    body.push_str("source_captions = [\"a ball on the left\", \"a ball in the middle\"]\n");
    std::fs::write(&path, body).unwrap();
    let manifest = run(&load_config(&path).unwrap(), &PatchNccMatcher::default(), None).unwrap();
    assert!(manifest.steps.iter().any(|s| s.stages.contains(&Stage::DenoiseSource)));
}

#[test]
fn no_graph_runs_images_independently_but_still_fuses() {
    let mut cfg = common::small_config();
    cfg.ablation.no_graph = true;
    let out = generate_set(&cfg, &common::inputs(3, 32), &common::mock()).unwrap();
    assert!(!out.manifest.pairwise);
    assert_eq!(out.manifest.edge_prompts.len(), 3);
    for s in &out.manifest.steps {
        let mut expect = vec![Stage::DenoiseImages];
        if s.t > 10 {
            expect.push(Stage::Guidance);
        }
        assert_eq!(s.stages, expect);
    }
}

#[test]
fn cli_generate_eval_and_analyze() {
    let root = tempfile::tempdir().unwrap();
    write_inputs(&root.path().join("in"), 3);
    let path = write_config(root.path(), "");
    let mut body = std::fs::read_to_string(&path).unwrap();
    body.push_str("[debug]\ndump_features = true\n");
    std::fs::write(&path, body).unwrap();
    let exe = env!("CARGO_BIN_EXE_setfuse");

    let out = Command::new(exe)
        .args(["generate", "--config"])
        .arg(&path)
        .args(["--no-guidance", "--seed", "3"])
        .env_remove("SETFUSE_VLM_ENDPOINT")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = root.path().join("out/r");
    let manifest = RunManifest::read(&dir.join("manifest.json")).unwrap();
    assert!(!manifest.guidance);
    assert_eq!(manifest.config.seed, 3);

    let eval = Command::new(exe).args(["eval", "--run"]).arg(&dir).output().unwrap();
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    let score = report["dino-matchsim"]["score"].as_f64().unwrap();
    assert!(score > 0.0 && score <= 1.0);

    let masks = root.path().join("masks");
    std::fs::create_dir_all(&masks).unwrap();
    for k in 0..3 {
        image::GrayImage::from_fn(64, 64, |x, _| image::Luma([if x < 32 { 255 } else { 0 }]))
            .save(masks.join(format!("{k:02}.png")))
            .unwrap();
    }
    let masked = Command::new(exe).args(["eval", "--run"]).arg(&dir).arg("--masks").arg(&masks).output().unwrap();
    assert!(masked.status.success(), "{}", String::from_utf8_lossy(&masked.stderr));
    let masked: serde_json::Value = serde_json::from_slice(&masked.stdout).unwrap();
    assert_ne!(masked["dino-matchsim"]["score"], report["dino-matchsim"]["score"]);

    let cache = root.path().join("cache");
    let matched = Command::new(exe)
        .args(["match", "--in"])
        .arg(root.path().join("in"))
        .args(["--size", "64", "--out"])
        .arg(&cache)
        .output()
        .unwrap();
    assert!(matched.status.success(), "{}", String::from_utf8_lossy(&matched.stderr));
    assert_eq!(String::from_utf8(matched.stdout).unwrap().lines().count(), 6);
    assert!(cache.is_dir());

    let analyze = Command::new(exe).args(["analyze", "--features"]).arg(dir.join("features")).output().unwrap();
    assert!(analyze.status.success(), "{}", String::from_utf8_lossy(&analyze.stderr));
    let table = String::from_utf8(analyze.stdout).unwrap();
    assert!(table.starts_with("timestep\tblock"));
    assert!(table.lines().count() > 1);

    let bad = Command::new(exe).args(["generate", "--config"]).arg(&path).args(["--degree-cap", "0"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("degree_cap"));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use brnet::autodiff::Checkpoint;
use brnet::data::{read_annotations, read_manifest, ClassVocab};
use brnet::model::{Detector, ModelConfig};

fn brnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brnet"))
        .args(args)
        .env_remove("BRNET_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).expect("last stderr line is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small model over 512-point scenes so commands finish quickly.
fn small_model() -> ModelConfig {
    ModelConfig {
        num_points: 512,
        num_seeds: 64,
        seed_channels: 16,
        sa1_group: 8,
        sa1_channels: [8, 16],
        sa2_centers: 16,
        sa2_group: 8,
        sa2_channels: [16, 16],
        num_clusters: 8,
        cluster_group: 8,
        cluster_channels: 16,
        head_channels: 16,
        revisit_group: 8,
        revisit_channels: [16, 8, 8],
        revisit_proj: 16,
        ..ModelConfig::default()
    }
}

fn write_spec(dir: &Path) -> std::path::PathBuf {
    let mut spec = brnet::data::SyntheticSceneSpec::oriented();
    spec.num_points = 512;
    let path = dir.join("spec.json");
    fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
    path
}

fn write_config(dir: &Path, data: serde_json::Value) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "schema": 1,
        "model": small_model(),
        "train": { "batch_size": 2, "epochs": 1, "base_lr": 0.003, "seed": 3 },
        "eval": { "iou_thresholds": [0.25, 0.5] },
        "data": data,
        "out_dir": p(&dir.join("run")),
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn save_untrained(dir: &Path, cfg: ModelConfig) -> std::path::PathBuf {
    let det = Detector::new(cfg, 1).unwrap();
    let vocab = ClassVocab(vec!["table".into(), "chair".into(), "bookshelf".into()]);
    let path = dir.join("untrained.brn");
    det.to_checkpoint(0, None, &vocab).save(&path).unwrap();
    path
}

#[test]
fn gen_data_is_deterministic_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&brnet(&["gen-data", "--spec", p(&spec), "--count", "3", "--test-count", "2", "--seed", "7", "--out", p(out)]));
    }
    let entries = read_manifest(&a.join("manifest.json")).unwrap();
    assert_eq!(entries.iter().filter(|e| e.split == "train").count(), 3);
    assert_eq!(entries.iter().filter(|e| e.split == "test").count(), 2);
    for e in &entries {
        let rel = e.cloud.strip_prefix(&a).unwrap();
        assert_eq!(fs::read(&e.cloud).unwrap(), fs::read(b.join(rel)).unwrap());
        let rel = e.annotation.strip_prefix(&a).unwrap();
        assert_eq!(fs::read(&e.annotation).unwrap(), fs::read(b.join(rel)).unwrap());
        for r in read_annotations(&e.annotation).unwrap() {
            assert!(r.size.iter().all(|s| *s > 0.0));
        }
    }
}

#[test]
fn gen_data_with_zero_scenes_gives_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    ok(&brnet(&["gen-data", "--count", "0", "--out", p(&out)]));
    assert!(read_manifest(&out.join("manifest.json")).unwrap().is_empty());
}

#[test]
fn train_eval_infer_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let data = dir.path().join("data");
    ok(&brnet(&["gen-data", "--spec", p(&spec), "--count", "4", "--test-count", "2", "--out", p(&data)]));
    let cfg = write_config(
        dir.path(),
        serde_json::json!({ "manifest": { "path": "data/manifest.json", "classes": ["table", "chair", "bookshelf"] } }),
    );
    ok(&brnet(&["train", "--config", p(&cfg)]));
    let run = dir.path().join("run");
    let ckpt = run.join("checkpoints").join("final.brn");
    assert!(ckpt.exists());
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 2);
    assert!(run.join("report.json").exists());

    let report = dir.path().join("report.json");
    let manifest = data.join("manifest.json");
    ok(&brnet(&["eval", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--out", p(&report)]));
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["thresholds"].as_array().unwrap().len(), 2);

    let cloud = data.join("scenes").join("test_00000.bpc");
    let dets = dir.path().join("dets.json");
    ok(&brnet(&["infer", "--checkpoint", p(&ckpt), "--cloud", p(&cloud), "--threshold", "0", "--out", p(&dets)]));
    let records = read_annotations(&dets).unwrap();
    assert!(records.iter().all(|r| r.score.is_some()));

    let mesh = dir.path().join("scene.ply");
    ok(&brnet(&["viz-export", "--cloud", p(&cloud), "--detections", p(&dets), "--out", p(&mesh)]));
    let ply = fs::read_to_string(&mesh).unwrap();
    let expected = 512 + records.len() * 12 * 8;
    assert!(ply.contains(&format!("element vertex {expected}\n")), "{}", &ply[..200]);
}

#[test]
fn infer_all_returns_every_proposal() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = save_untrained(dir.path(), small_model());
    let mut spec = brnet::data::SyntheticSceneSpec::oriented();
    spec.num_points = 512;
    spec.clutter_fraction = 0.0;
    let scene = brnet::data::generate_scene(&spec).unwrap();
    let cloud = dir.path().join("c.bpc");
    brnet::data::write_point_cloud(&cloud, &scene.points).unwrap();
    let out = brnet(&["infer", "--checkpoint", p(&ckpt), "--cloud", p(&cloud), "--all"]);
    ok(&out);
    let records: Vec<serde_json::Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(records.len(), small_model().num_clusters);
}

#[test]
fn eval_rejects_mismatched_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = save_untrained(dir.path(), small_model());
    let data = dir.path().join("data");
    let mut spec = brnet::data::SyntheticSceneSpec::oriented();
    spec.num_points = 512;
    spec.classes[0].name = "desk".into();
    let spec_path = dir.path().join("spec.json");
    fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    ok(&brnet(&["gen-data", "--spec", p(&spec_path), "--count", "0", "--test-count", "1", "--out", p(&data)]));
    let out = brnet(&["eval", "--checkpoint", p(&ckpt), "--manifest", p(&data.join("manifest.json"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = error_line(&out);
    assert_eq!(err["error"]["kind"], "input");
    assert!(err["error"]["message"].as_str().unwrap().contains("vocabulary"));
}

#[test]
fn ablate_identical_arms_give_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = brnet::data::SyntheticSceneSpec::oriented();
    spec.num_points = 512;
    let cfg = write_config(
        dir.path(),
        serde_json::json!({ "synthetic": { "spec": spec, "train_scenes": 2, "test_scenes": 2 } }),
    );
    let out = dir.path().join("abl");
    ok(&brnet(&["ablate", "--config", p(&cfg), "--variant", "ca-reg-baseline,ca-reg-baseline", "--out", p(&out)]));
    let results: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(results.len(), 2);
    assert_eq!(results[0], results[1]);
    let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let out = brnet(&["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"]["kind"], "usage");

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"schema": 1, "surprise": true}"#).unwrap();
    let out = brnet(&["train", "--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"]["kind"], "config");

    let out = brnet(&["infer", "--checkpoint", p(&dir.path().join("missing.brn")), "--cloud", "x.bpc"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"]["kind"], "io");

    let garbage = dir.path().join("garbage.bpc");
    fs::write(&garbage, b"NOPE").unwrap();
    let ckpt = save_untrained(dir.path(), small_model());
    let out = brnet(&["infer", "--checkpoint", p(&ckpt), "--cloud", p(&garbage)]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"]["kind"], "format");

    let out = Command::new(env!("CARGO_BIN_EXE_brnet"))
        .args(["gen-data", "--count", "0", "--out", p(&dir.path().join("g"))])
        .env("BRNET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn nonfinite_training_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = brnet::data::SyntheticSceneSpec::oriented();
    spec.num_points = 512;
    let cfg = write_config(
        dir.path(),
        serde_json::json!({ "synthetic": { "spec": spec, "train_scenes": 2, "test_scenes": 0 } }),
    );
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["train"]["base_lr"] = serde_json::json!(1e300);
    v["train"]["epochs"] = serde_json::json!(3);
    fs::write(&cfg, v.to_string()).unwrap();
    let out = brnet(&["train", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_line(&out)["error"]["kind"], "non_finite");
}

#[test]
fn checkpoint_written_by_train_loads() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = brnet::data::SyntheticSceneSpec::oriented();
    spec.num_points = 512;
    let cfg = write_config(
        dir.path(),
        serde_json::json!({ "synthetic": { "spec": spec, "train_scenes": 2, "test_scenes": 0 } }),
    );
    ok(&brnet(&["train", "--config", p(&cfg), "--variant", "rpg-only", "--strategy", "grid8"]));
    let ckpt = Checkpoint::load(&dir.path().join("run/checkpoints/final.brn")).unwrap();
    let meta = Detector::checkpoint_meta(&ckpt).unwrap();
    assert_eq!(meta.model.variant.to_string(), "rpg-only");
    assert_eq!(meta.model.strategy.to_string(), "grid8");
}

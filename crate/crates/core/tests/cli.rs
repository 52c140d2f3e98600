use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gcnn::eval::{write_detections, Detection};
use gcnn::synth::DatasetManifest;

const SMALL: &str = r#"
n_train = 6
n_test = 3
ablation_seeds = [0]
[train]
n_iter_per_stage = 8
samples_per_image_per_step = 16
hidden_sizes = [8]
classifier_hidden_sizes = [8]
[train.features]
pool_h = 3
pool_w = 3
"#;

fn gcnn(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("small.toml");
    if !cfg.exists() {
        fs::write(&cfg, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_gcnn"))
        .args(["--config", cfg.to_str().unwrap()])
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn generate(dir: &Path, out: &str) {
    ok(gcnn(dir, &["--out", out, "generate"]));
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = d.join("run");
    let o = out.to_str().unwrap();
    generate(d, o);
    ok(gcnn(d, &["--out", o, "train"]));
    assert!(out.join("checkpoint_gcnn.json").exists());
    let log = fs::read_to_string(out.join("train_log_gcnn.jsonl")).unwrap();
    assert!(log.starts_with("{\"format\":\"gcnn-train-log\""));
    assert_eq!(log.lines().count(), 1 + 3 * 8);

    ok(gcnn(d, &["--out", o, "detect"]));
    let dump = out.join("detections_gcnn_s5.jsonl");
    let traj = fs::read_to_string(out.join("trajectories_gcnn_s5.jsonl")).unwrap();
    assert!(traj.starts_with("{\"format\":\"gcnn-trajectories\""));

    let printed = ok(gcnn(d, &["--out", o, "eval", "--dump", dump.to_str().unwrap()]));
    assert!(printed.contains("mAP"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let map = report["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
}

#[test]
fn train_and_detect_are_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for run in ["a", "b"] {
        let o = d.join(run);
        let o = o.to_str().unwrap();
        generate(d, o);
        ok(gcnn(d, &["--out", o, "--mode", "1step", "train"]));
        ok(gcnn(d, &["--out", o, "--mode", "1step", "--s-test", "3", "detect"]));
    }
    for f in ["train_manifest.json", "test_manifest.json", "checkpoint_1step.json", "train_log_1step.jsonl", "detections_1step_s3.jsonl", "trajectories_1step_s3.jsonl"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn seed_flag_changes_the_data() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(gcnn(d, &["--out", d.join("s1").to_str().unwrap(), "--seed", "1", "generate"]));
    ok(gcnn(d, &["--out", d.join("s2").to_str().unwrap(), "--seed", "2", "generate"]));
    let a = fs::read(d.join("s1/train_manifest.json")).unwrap();
    let b = fs::read(d.join("s2/train_manifest.json")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn zero_iterations_scores_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = d.join("run");
    let o = o.to_str().unwrap();
    generate(d, o);
    ok(gcnn(d, &["--out", o, "train"]));
    ok(gcnn(d, &["--out", o, "--s-test", "0", "detect"]));
    let traj = fs::read_to_string(d.join("run/trajectories_gcnn_s0.jsonl")).unwrap();
    for line in traj.lines().skip(1) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["step"], 0);
    }
}

#[test]
fn empty_and_oracle_dumps() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = d.join("run");
    let os = o.to_str().unwrap();
    generate(d, os);
    let manifest = DatasetManifest::read(&o.join("test_manifest.json")).unwrap();

    let empty = o.join("empty.jsonl");
    write_detections(fs::File::create(&empty).unwrap(), &[]).unwrap();
    let printed = ok(gcnn(d, &["--out", os, "eval", "--dump", empty.to_str().unwrap()]));
    assert!(printed.trim_end().ends_with("mAP 0.0000"), "{printed}");

    let perfect: Vec<Detection> = manifest
        .scenes
        .iter()
        .flat_map(|s| s.gts.iter().map(|g| Detection { image_id: s.scene_id, class_label: g.class_label, score: 1.0, bbox: g.bbox }))
        .collect();
    let oracle = o.join("oracle.jsonl");
    write_detections(fs::File::create(&oracle).unwrap(), &perfect).unwrap();
    let report = o.join("oracle_metrics.json");
    let printed = ok(gcnn(d, &["--out", os, "eval", "--dump", oracle.to_str().unwrap(), "--report", report.to_str().unwrap()]));
    assert!(printed.trim_end().ends_with("mAP 1.0000"), "{printed}");
}

#[test]
fn ablation_writes_table_for_every_method() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = d.join("abl");
    let printed = ok(gcnn(d, &["--out", o.to_str().unwrap(), "ablation"]));
    for m in ["gcnn", "1step", "ifrcnn"] {
        assert_eq!(printed.lines().filter(|l| l.starts_with(m)).count(), 5, "{printed}");
        assert!(o.join(format!("seed0/{m}_s5.jsonl")).exists());
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(o.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json["format"], "gcnn-ablation");
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = gcnn(d, &["--out", d.join("x").to_str().unwrap(), "train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let bad = d.join("bad.toml");
    fs::write(&bad, "s_test = \"five\"\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gcnn")).args(["--config", bad.to_str().unwrap(), "generate"]).output().unwrap();
    assert!(!out.status.success());

    let out = gcnn(d, &["--mode", "fast", "generate"]);
    assert!(!out.status.success());
}

#[test]
fn image_dumps_load_like_procedural_scenes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("small.toml"), format!("dump_images = true\n{SMALL}")).unwrap();
    let o = d.join("run");
    generate(d, o.to_str().unwrap());
    assert!(o.join("train_images.bin").exists());
    let (_, from_dump) = gcnn::synth::load_dataset(&o.join("train_manifest.json")).unwrap();
    let regenerated = gcnn::synth::generate_range(&gcnn::synth::SynthConfig::default(), 0, 6).unwrap();
    assert_eq!(from_dump, regenerated);
}

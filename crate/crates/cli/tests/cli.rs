//! The `bgcut` binary end to end on a tiny model, plus its exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bgcut::frame::Mask;
use bgcut_cli::config::{apply_override, Config};

const TINY: &str = r#"
[dataset]
seed = 3
train_clips = 2
test_clips = 1

[dataset.scene]
width = 24
height = 24
frames_per_clip = 3
bg_samples = 2

[model.segnet.backbone]
stem_channels = 4
stage_channels = [4, 6, 6, 8]
blocks_per_stage = [1, 1, 1, 1]
input_size_hint = [16, 16]

[model.attenuation]
fuse_channels = 5

[model.refinement]
n = 1
encoder_channels = [4, 6, 8]

[train]
crop = 16
max_iterations = 3
n = 1
seed = 2

[prune]
num_steps = 2
finetune_iters_per_step = 1
latency_size = [0, 0]

[bench]
iterations = 2
warmup = 1

[io]
train_manifest = "data/train.json"
stage1_checkpoint = "runs/stage1.bgc"
output = "runs/model.bgc"
"#;

fn bgcut(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bgcut"))
        .args(args)
        .env("BGCUT_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bgcut(args);
    assert!(
        out.status.success(),
        "bgcut {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[test]
fn documented_config_equals_builtin_defaults() {
    let mut file = Config::load(Some(&repo_root().join("configs/default.toml")), &[]).unwrap();
    file.base_dir = Default::default();
    assert_eq!(file, Config::default());
    // Scenes fit the default crop.
    assert!(file.dataset.scene.width >= file.train.crop);
}

#[test]
fn quick_configs_parse() {
    for name in ["quick-stage1", "quick-stage2", "quick-prune"] {
        let cfg = Config::load(Some(&repo_root().join(format!("configs/{name}.toml"))), &[]).unwrap();
        assert!(cfg.train.crop <= 48, "{name}");
    }
}

#[test]
fn overrides_parse_typed_values_and_create_tables() {
    let mut v = toml::Value::Table(Default::default());
    apply_override(&mut v, "train.base_lr=0.25").unwrap();
    apply_override(&mut v, "model.refinement.guidance=center").unwrap();
    apply_override(&mut v, "eval.band_widths=[2, 4]").unwrap();
    let cfg: Config = v.try_into().unwrap();
    assert_eq!(cfg.train.base_lr, 0.25);
    assert_eq!(cfg.model.refinement.guidance, bgcut::refinement::Guidance::Center);
    assert_eq!(cfg.eval.band_widths, [2, 4]);

    assert!(Config::load(None, &["train.base_lr".into()]).is_err());
    assert!(Config::load(None, &["nosuch.key=1".into()]).is_err());
    assert!(Config::load(None, &["train.crop=\"wide\"".into()]).is_err());
}

#[test]
fn full_pipeline_on_a_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");

    let gen = ok(&["dataset", "gen", s(&cfg), s(&data)]);
    assert!(gen.contains("train: 2 clips") && gen.contains("test: 1 clips"), "{gen}");

    ok(&["train", "stage1", s(&cfg), "--set", "io.output=\"runs/stage1.bgc\""]);
    assert!(root.join("runs/stage1.bgc").exists());
    let log = std::fs::read_to_string(root.join("runs/stage1.bgc.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4, "{log}");
    let meta = std::fs::read_to_string(root.join("runs/stage1.bgc.meta.json")).unwrap();
    assert!(meta.contains("\"stage\": \"stage1\"") && meta.contains("\"full_scale\""), "{meta}");

    let pruned = ok(&["prune", s(&cfg), "--set", "io.output=\"runs/pruned.bgc\""]);
    assert!(pruned.contains("latency ratio n/a"), "{pruned}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("runs/pruned.bgc.prune.json")).unwrap()).unwrap();
    assert_eq!(report["steps"].as_array().unwrap().len(), 2);

    // Stage 2 starts from the pruned network.
    ok(&["train", "stage2", s(&cfg), "--set", "io.stage1_checkpoint=\"runs/pruned.bgc\""]);
    let model = root.join("runs/model.bgc");
    assert!(model.exists());

    let test_manifest = data.join("test.json");
    let preds = root.join("preds");
    let out = ok(&["infer", s(&test_manifest), s(&model), "--out", s(&preds)]);
    assert!(out.contains("attenuation_forwards: 3"), "{out}");
    let clip_dir = std::fs::read_dir(&preds)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_dir())
        .unwrap();
    let mask = Mask::load_png(&clip_dir.join("mask_0000.png")).unwrap();
    assert_eq!(mask.dims(), (24, 24));
    let raw = image::open(clip_dir.join("mask_0000.png")).unwrap().to_luma8();
    assert!(raw.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));

    let report = ok(&["eval", s(&preds), s(&test_manifest), "--band-widths", "1,3"]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["counters"]["attenuation_forwards"], 3);
    assert_eq!(report["counters"]["refinement_passes"], 3);
    assert_eq!(report["counters"]["bg_backbone_passes"], 2);
    let iou = report["mean"]["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&iou));
    let csv = std::fs::read_to_string(preds.join("band_curve.csv")).unwrap();
    assert!(csv.starts_with("width,iou\n1,") && csv.contains("\n3,"), "{csv}");

    let bench = ok(&["bench", s(&model), "--size", "16x24", "--config", s(&cfg)]);
    let bench: serde_json::Value = serde_json::from_str(&bench).unwrap();
    assert_eq!(bench["attenuation"]["samples"], 2);
    assert_eq!(bench["width"], 24);
    assert_eq!(bench["machine"]["parallel"], false);

    let bg = root.join("bg.png");
    image::RgbImage::from_pixel(7, 5, image::Rgb([0, 200, 0])).save(&bg).unwrap();
    let clip_src = data.join(clip_dir.file_name().unwrap());
    let composited = root.join("comp");
    ok(&["composite", s(&clip_src), s(&clip_dir), s(&bg), "--out", s(&composited), "--feather", "0"]);
    let n = std::fs::read_dir(&composited).unwrap().count();
    assert_eq!(n, 3);
}

fn code(args: &[&str]) -> i32 {
    bgcut(args).status.code().unwrap()
}

#[test]
fn failures_exit_with_their_category_code() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // Usage.
    assert_eq!(code(&["train"]), 2);
    assert_eq!(code(&["bench", "x.bgc", "--size", "12"]), 5);
    // Config.
    let bad = root.join("bad.toml");
    std::fs::write(&bad, "[train]\nbase_lr = \"fast\"\n").unwrap();
    assert_eq!(code(&["train", "stage1", s(&bad)]), 5);
    // Missing file.
    assert_eq!(code(&["dataset", "gen", s(&root.join("none.toml")), s(root)]), 3);
    // Corrupt checkpoint.
    let junk = root.join("junk.bgc");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&["bench", s(&junk)]), 4);

    let out = Command::new(env!("CARGO_BIN_EXE_bgcut"))
        .args(["config"])
        .env("BGCUT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("BGCUT_THREADS"));
}

//! Command-level integration tests; the heavier end-to-end criteria live in
//! the dedicated acceptance suite.

use std::path::{Path, PathBuf};
use std::process::Command;

use yolos_cli::commands;
use yolos_cli::config::RunConfig;
use yolos_cli::train;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_yolos"))
}

fn quick_cfg(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.depth = 1;
    cfg.model.width = 16;
    cfg.model.heads = 2;
    cfg.model.det_tokens = 4;
    cfg.model.pe_grid = (4, 4);
    cfg.data.canvas = (32, 32);
    cfg.data.train_images = 8;
    cfg.data.eval_images = 4;
    cfg.optimizer.total_steps = 4;
    cfg.optimizer.batch_size = 2;
    cfg.out = out.display().to_string();
    cfg
}

#[test]
fn failing_command_exits_nonzero_with_json_line_on_stderr() {
    let output = binary()
        .args(["eval", "--checkpoint", "/nonexistent/path.ckpt"])
        .output()
        .expect("spawn");
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    let line = stderr.lines().last().expect("diagnostic line");
    let parsed: serde_json::Value = serde_json::from_str(line).expect("machine-parsable stderr");
    assert!(parsed["error"].as_str().unwrap().contains("path.ckpt"), "{parsed}");
}

#[test]
fn unknown_set_key_is_reported() {
    let output = binary()
        .args(["train", "--set", "model.nonsense=1"])
        .output()
        .expect("spawn");
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("unknown key"), "{stderr}");
}

#[test]
fn flops_table_prints_five_preset_rows() {
    let dir = tempfile::tempdir().unwrap();
    let output = binary()
        .env("NO_COLOR", "1")
        .args(["flops", "--table", "--out", dir.path().to_str().unwrap()])
        .output()
        .expect("spawn");
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    for name in ["ti", "s", "b", "dwr", "fast-dwr"] {
        assert!(stdout.lines().any(|l| l.starts_with(name)), "missing {name} in\n{stdout}");
    }
    // Machine-readable record emitted alongside the table.
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("flops.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 5);
}

#[test]
fn scale_command_regenerates_published_uniform_config() {
    let dir = tempfile::tempdir().unwrap();
    let output = binary()
        .args([
            "scale",
            "--model",
            "ti",
            "--target",
            "4.6e9",
            "--strategy",
            "uniform",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .expect("spawn");
    assert!(output.status.success());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("scale.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["depth"], 19);
    assert_eq!(json["config"]["width"], 240);
    assert_eq!(json["resolution"][0], 272);
}

#[test]
fn train_writes_config_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_cfg(dir.path());
    let ckpt = commands::run_train(&cfg, None).unwrap();
    assert!(ckpt.exists());
    assert!(dir.path().join("config.txt").exists());

    let log = std::fs::read_to_string(dir.path().join("loss_log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4);
    for (i, line) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["step"], i as u64);
        for key in ["total", "cls", "l1", "giou", "lr"] {
            assert!(v[key].is_f64(), "missing {key} in {v}");
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_eval_metrics_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_cfg(dir.path());
    let ckpt = commands::run_train(&cfg, None).unwrap();
    let a = commands::run_eval(&cfg, &ckpt, None).unwrap();

    // Load + re-save: metrics must be identical because stored values are a
    // fixed point of the f32 quantization.
    let (mc, params) = yolos_cli::checkpoint::load(&ckpt).unwrap();
    let ckpt2 = dir.path().join("resaved.ckpt");
    yolos_cli::checkpoint::save(&ckpt2, &mc, &params).unwrap();
    let b = commands::run_eval(&cfg, &ckpt2, None).unwrap();
    assert_eq!(a.mean_ap, b.mean_ap);
    assert_eq!(a.ap_per_iou, b.ap_per_iou);
}

#[test]
fn predict_threshold_extremes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_cfg(dir.path());
    let ckpt = commands::run_train(&cfg, None).unwrap();

    // A synthetic sample written to disk as the input image.
    let data = train::build_eval_dataset(&cfg).unwrap();
    let img_path = dir.path().join("sample.ppm");
    yolos_core::ppm::write_ppm(&img_path, &data[0].image).unwrap();

    let n_hi = commands::run_predict(&cfg, &ckpt, &img_path, 1.1, false).unwrap();
    assert_eq!(n_hi, 0);
    let n_lo = commands::run_predict(&cfg, &ckpt, &img_path, 0.0, true).unwrap();
    assert!(n_lo <= cfg.model.det_tokens);
    assert!(dir.path().join("predictions.json").exists());
    assert!(dir.path().join("overlay.ppm").exists());
}

#[test]
fn overlay_rendering_matches_reference_pixels() {
    // Draw one known box on a known canvas and compare against the
    // independently computed expected buffer.
    let mut canvas = yolos_core::dataset::Image::filled(8, 8, 3, 0.0);
    let b = yolos_core::boxes::BoxCxcywh::new(0.5, 0.5, 0.5, 0.5);
    yolos_core::ppm::draw_box_outline(&mut canvas, &b, &[1.0, 0.0, 0.0]);
    let bytes = yolos_core::ppm::encode_ppm(&canvas).unwrap();

    let mut expected = vec![0u8; 8 * 8 * 3];
    for x in 2..=6 {
        for y in [2usize, 6] {
            expected[(y * 8 + x) * 3] = 255;
            expected[(x * 8 + y) * 3] = 255;
        }
    }
    let header = b"P6\n8 8\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(&bytes[header.len()..], &expected[..]);
}

#[test]
fn analyze_commands_emit_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_cfg(dir.path());
    cfg.data.eval_images = 3;
    let ckpt = commands::run_train(&cfg, None).unwrap();

    for which in ["geometry", "class", "scatter", "categories", "attention"] {
        let summary = commands::run_analyze(&cfg, &ckpt, which, None).unwrap();
        assert!(summary.is_object(), "{which}: {summary}");
        assert!(dir.path().join(format!("analysis_{which}.json")).exists());
    }
    // Scatter thumbnails for the first tokens, attention grids per head/token.
    assert!(dir.path().join("scatter_token0.ppm").exists());
    assert!(dir.path().join("attn_l0_h0_t0.ppm").exists());
    let att = yolos_core::ppm::read_ppm(&dir.path().join("attn_l0_h0_t0.ppm")).unwrap();
    assert_eq!((att.height, att.width), (4 * 8, 4 * 8));
}

#[test]
fn config_file_and_cli_override_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path: PathBuf = dir.path().join("cfg.txt");
    std::fs::write(&cfg_path, "optimizer.total_steps = 999\nmodel.depth = 1\nmodel.width = 16\nmodel.heads = 2\nmodel.det_tokens = 4\nmodel.pe_grid = 4x4\ndata.canvas = 32x32\ndata.train_images = 4\ndata.eval_images = 2\noptimizer.batch_size = 1\n").unwrap();
    let output = binary()
        .args([
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--set",
            "optimizer.total_steps=2",
            "--out",
            dir.path().join("run").to_str().unwrap(),
            "--seed",
            "9",
        ])
        .output()
        .expect("spawn");
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let log = std::fs::read_to_string(dir.path().join("run/loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2, "--set must override the file value");
    let saved = std::fs::read_to_string(dir.path().join("run/config.txt")).unwrap();
    assert!(saved.contains("seed = 9"));
}

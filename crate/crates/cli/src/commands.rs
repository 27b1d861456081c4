//! Implementations behind the subcommands; the binary only parses arguments
//! and routes here, which keeps every behavior callable from tests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;
use yolos_core::analysis;
use yolos_core::dataset::LabeledImage;
use yolos_core::eval::{coco_thresholds, detections_from_output, evaluate_ap, ApReport, EvalImage};
use yolos_core::model::Model;
use yolos_core::ppm;
use yolos_core::scaling::{self, FlopsReport, HeadSpec, ScaleConfig, ScaledModel};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::train::{self, NonFiniteLoss, StepLog};

fn ensure_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

/// `train`: optimize, stream the loss log, persist the checkpoint.
pub fn run_train(cfg: &RunConfig, init_from: Option<&Path>) -> Result<PathBuf> {
    let out = PathBuf::from(&cfg.out);
    ensure_out(&out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let log_path = out.join("loss_log.jsonl");
    let mut log_file = fs::File::create(&log_path)?;
    let result = train::train(cfg, init_from, |record: &StepLog| {
        let line = serde_json::to_string(record).expect("log record");
        writeln!(log_file, "{line}").expect("log write");
    });
    match result {
        Ok(r) => {
            let ckpt = out.join("model.ckpt");
            checkpoint::save(&ckpt, &cfg.model, &r.model.params)?;
            Ok(ckpt)
        }
        Err(err) => {
            if let Some(nf) = err.downcast_ref::<NonFiniteLoss>() {
                let ckpt = out.join("last_good.ckpt");
                checkpoint::save(&ckpt, &cfg.model, &nf.last_good)?;
                bail!("non-finite loss at step {}; last good checkpoint at {}", nf.step, ckpt.display());
            }
            Err(err)
        }
    }
}

/// Forward pass over a dataset producing evaluation inputs.
fn predict_dataset(model: &Model, data: &[LabeledImage], resolution: Option<usize>) -> Result<Vec<EvalImage>> {
    let p = model.config.patch_size;
    data.iter()
        .map(|img| {
            let prepared = match resolution {
                Some(short) => yolos_core::dataset::resize_shortest(img, short, usize::MAX / 2, p),
                None if img.image.height % p != 0 || img.image.width % p != 0 => {
                    yolos_core::dataset::resize_shortest(img, img.image.height.min(img.image.width), usize::MAX / 2, p)
                }
                None => img.clone(),
            };
            let out = model.forward(&prepared.image.to_tensor(), false)?;
            Ok(EvalImage {
                size: (prepared.image.height, prepared.image.width),
                ground_truth: prepared.objects.clone(),
                detections: detections_from_output(&out, model.config.num_classes),
            })
        })
        .collect()
}

/// `eval`: AP over the held-out split at an optional inference resolution.
pub fn run_eval(cfg: &RunConfig, checkpoint_path: &Path, resolution: Option<usize>) -> Result<ApReport> {
    let (model_cfg, params) = checkpoint::load(checkpoint_path)?;
    let model = Model::new(model_cfg, params)?;
    let data = train::build_eval_dataset(cfg)?;
    let images = predict_dataset(&model, &data, resolution)?;
    let report = evaluate_ap(&images, &coco_thresholds());
    let out = PathBuf::from(&cfg.out);
    ensure_out(&out)?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// `predict`: detections for one image file, JSON plus optional overlay.
pub fn run_predict(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    image_path: &Path,
    score_threshold: f64,
    overlay: bool,
) -> Result<usize> {
    let (model_cfg, params) = checkpoint::load(checkpoint_path)?;
    let model = Model::new(model_cfg, params)?;
    let image = ppm::read_image(image_path)?;
    let padded = image.pad_to_multiple(model.config.patch_size);
    let output = model.forward(&padded.to_tensor(), false)?;
    let detections: Vec<_> = detections_from_output(&output, model.config.num_classes)
        .into_iter()
        .filter(|d| d.score >= score_threshold)
        .collect();

    let out = PathBuf::from(&cfg.out);
    ensure_out(&out)?;
    let records = yolos_core::coco::prediction_records(
        0,
        (padded.height, padded.width),
        &detections,
        None,
    );
    fs::write(out.join("predictions.json"), serde_json::to_string_pretty(&records)?)?;

    if overlay {
        let mut canvas = padded.clone();
        for d in &detections {
            let color = match d.class_id % 3 {
                0 => [1.0, 0.1, 0.1],
                1 => [0.1, 1.0, 0.1],
                _ => [0.2, 0.4, 1.0],
            };
            ppm::draw_box_outline(&mut canvas, &d.bbox, &color);
        }
        ppm::write_ppm(&out.join("overlay.ppm"), &canvas)?;
    }
    Ok(detections.len())
}

pub fn preset(name: &str) -> Result<(ScaleConfig, (usize, usize))> {
    Ok(match name {
        "ti" | "tiny" => (ScaleConfig::tiny(), (224, 224)),
        "s" | "small" => (ScaleConfig::small(), (224, 224)),
        "b" | "base" => (ScaleConfig::base(), (224, 224)),
        "dwr" => (ScaleConfig::vit(19, 240, 6), (272, 272)),
        "fast-dwr" | "fast_dwr" => (ScaleConfig::vit(14, 330, 6), (240, 240)),
        other => bail!("unknown model preset {other:?} (expected ti|s|b|dwr|fast-dwr)"),
    })
}

const TABLE_PRESETS: [&str; 5] = ["ti", "s", "b", "dwr", "fast-dwr"];

/// `flops`: one row, or the whole preset table.
pub fn run_flops(
    model: &str,
    resolution: Option<(usize, usize)>,
    extra_tokens: usize,
    det_classes: Option<usize>,
    table: bool,
    out: Option<&Path>,
) -> Result<Vec<(String, FlopsReport)>> {
    let rows: Vec<&str> = if table { TABLE_PRESETS.to_vec() } else { vec![model] };
    let mut reports = Vec::new();
    for name in rows {
        let (cfg, default_res) = preset(name)?;
        let res = resolution.unwrap_or(default_res);
        let heads = det_classes.map(|num_classes| HeadSpec {
            det_tokens: extra_tokens,
            num_classes,
        });
        let report = scaling::flops(&cfg, res, extra_tokens, heads)?;
        reports.push((name.to_string(), report));
    }

    println!(
        "{:<10} {:>6} {:>6} {:>11} {:>12} {:>12} {:>8}",
        "model", "depth", "width", "resolution", "flops", "f(lin)/att", "seq"
    );
    for (name, r) in &reports {
        let (cfg, default_res) = preset(name)?;
        let res = resolution.unwrap_or(default_res);
        println!(
            "{:<10} {:>6} {:>6} {:>11} {:>11.2}G {:>12.2} {:>8}",
            name,
            cfg.depth,
            cfg.width,
            format!("{}x{}", res.0, res.1),
            r.total / 1e9,
            r.ratio,
            r.seq_len
        );
    }
    if let Some(dir) = out {
        ensure_out(dir)?;
        let records: Vec<_> = reports
            .iter()
            .map(|(name, r)| json!({"model": name, "report": r}))
            .collect();
        fs::write(dir.join("flops.json"), serde_json::to_string_pretty(&records)?)?;
    }
    Ok(reports)
}

/// `scale`: grow a preset to a FLOPs target.
pub fn run_scale(
    model: &str,
    target_flops: f64,
    strategy: &str,
    alpha: f64,
    extra_tokens: usize,
    out: Option<&Path>,
) -> Result<ScaledModel> {
    let (base, base_res) = preset(model)?;
    let scaled = match strategy {
        "uniform" | "dwr" => scaling::scale_uniform(&base, base_res, extra_tokens, target_flops)?,
        "fast" | "fast-dwr" => scaling::scale_fast(&base, base_res, extra_tokens, target_flops, alpha)?,
        other => bail!("unknown strategy {other:?} (expected uniform|fast)"),
    };
    println!(
        "scaled {model}: depth {} width {} heads {} resolution {}x{} -> {:.3} GFLOPs, ratio {:.2}",
        scaled.config.depth,
        scaled.config.width,
        scaled.config.heads,
        scaled.resolution.0,
        scaled.resolution.1,
        scaled.flops / 1e9,
        scaled.ratio
    );
    if let Some(dir) = out {
        ensure_out(dir)?;
        fs::write(dir.join("scale.json"), serde_json::to_string_pretty(&scaled)?)?;
    }
    Ok(scaled)
}

/// `analyze`: detection-token statistics and rendered artifacts.
pub fn run_analyze(cfg: &RunConfig, checkpoint_path: &Path, which: &str, layer: Option<usize>) -> Result<serde_json::Value> {
    let (model_cfg, params) = checkpoint::load(checkpoint_path)?;
    let model = Model::new(model_cfg, params)?;
    let data = train::build_eval_dataset(cfg)?;
    let out = PathBuf::from(&cfg.out);
    ensure_out(&out)?;

    let summary = match which {
        "geometry" => {
            let rho = analysis::geometry_correlation(&model, &data)?;
            json!({"analysis": "geometry", "pearson": rho})
        }
        "class" => {
            let rho = analysis::class_feature_correlation(&model, &data)?;
            json!({"analysis": "class", "pearson": rho})
        }
        "scatter" => {
            let scatter = analysis::box_scatter(&model, &data)?;
            for (token, points) in scatter.iter().take(10).enumerate() {
                let img = analysis::render_scatter(points, 96);
                ppm::write_ppm(&out.join(format!("scatter_token{token}.ppm")), &img)?;
            }
            json!({"analysis": "scatter", "tokens": scatter.len(), "points": scatter.iter().map(|s| s.len()).collect::<Vec<_>>()})
        }
        "categories" => {
            let stats = analysis::category_stats(&model, &data)?;
            let null = analysis::permutation_null_std(
                &stats.per_token_histograms,
                model.config.num_classes,
                20,
                cfg.seed,
            );
            let mean = |m: &std::collections::BTreeMap<usize, f64>| {
                if m.is_empty() { 0.0 } else { m.values().sum::<f64>() / m.len() as f64 }
            };
            json!({
                "analysis": "categories",
                "stats": stats,
                "mean_cross_token_std": mean(&stats.cross_token_std),
                "permutation_null_std": mean(&null),
            })
        }
        "attention" => {
            let image = data
                .first()
                .context("analyze attention: empty dataset")?
                .image
                .to_tensor();
            let layer = layer.unwrap_or(model.config.depth - 1);
            let maps = analysis::extract_attention(&model, &image, layer)?;
            for (h, per_token) in maps.maps.iter().enumerate() {
                for (t, values) in per_token.iter().enumerate() {
                    let img = ppm::grayscale_map(values, maps.grid.0, maps.grid.1, 8);
                    ppm::write_ppm(&out.join(format!("attn_l{layer}_h{h}_t{t}.ppm")), &img)?;
                }
            }
            json!({"analysis": "attention", "layer": layer, "heads": maps.maps.len(), "grid": [maps.grid.0, maps.grid.1]})
        }
        other => bail!("unknown analysis {other:?} (expected geometry|class|scatter|categories|attention)"),
    };
    fs::write(out.join(format!("analysis_{which}.json")), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

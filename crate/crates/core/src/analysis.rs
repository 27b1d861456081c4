//! Detection-token inspection: correlation statistics between token
//! similarity and prediction geometry/classification, per-token box
//! scatters, category histograms, and attention-map extraction.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::dataset::{Image, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{DetectionOutput, Model};
use crate::tensor::Tensor;

/// One prediction pair inside one image.
#[derive(Clone, Copy, Debug)]
pub struct TokenPairSample {
    /// Cosine similarity of the two detection-token embeddings.
    pub cos_sim: f64,
    /// L2 distance of the two predicted box centers (normalized units).
    pub center_dist: f64,
    /// Cosine similarity of the two classifier output vectors.
    pub cls_feat_sim: f64,
}

/// Population Pearson correlation; `None` when either side has no variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid(
            "pearson",
            format!("need two equal-length series of at least 2, got {} and {}", xs.len(), ys.len()),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (vx * vy).sqrt()))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Kept predictions of one image: embeddings, logits and centers of the
/// tokens whose argmax class is foreground.
#[derive(Clone, Debug, Default)]
pub struct KeptPredictions {
    pub token_indices: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub centers: Vec<(f64, f64)>,
    pub areas: Vec<f64>,
    pub classes: Vec<usize>,
}

/// Applies the foreground filter to one model output.
pub fn kept_predictions(output: &DetectionOutput, num_classes: usize) -> KeptPredictions {
    let mut kept = KeptPredictions::default();
    for t in 0..output.class_logits.shape()[0] {
        let row = output.class_logits.row(t);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if argmax == num_classes {
            continue;
        }
        kept.token_indices.push(t);
        kept.embeddings.push(output.det_embeddings.row(t).to_vec());
        kept.logits.push(row.to_vec());
        kept.centers.push((output.boxes.at2(t, 0), output.boxes.at2(t, 1)));
        kept.areas.push(output.boxes.at2(t, 2) * output.boxes.at2(t, 3));
        kept.classes.push(argmax);
    }
    kept
}

/// All within-image prediction pairs.
pub fn token_pairs(kept: &KeptPredictions) -> Vec<TokenPairSample> {
    let n = kept.token_indices.len();
    let mut out = Vec::with_capacity(n.saturating_sub(1) * n / 2);
    for i in 0..n {
        for j in i + 1..n {
            let (cx_i, cy_i) = kept.centers[i];
            let (cx_j, cy_j) = kept.centers[j];
            out.push(TokenPairSample {
                cos_sim: cosine(&kept.embeddings[i], &kept.embeddings[j]),
                center_dist: ((cx_i - cx_j).powi(2) + (cy_i - cy_j).powi(2)).sqrt(),
                cls_feat_sim: cosine(&kept.logits[i], &kept.logits[j]),
            });
        }
    }
    out
}

fn mean_per_image_rho(
    per_image: impl Iterator<Item = Vec<TokenPairSample>>,
    y_of: impl Fn(&TokenPairSample) -> f64,
) -> Option<f64> {
    let mut rhos = Vec::new();
    for pairs in per_image {
        if pairs.len() < 2 {
            continue;
        }
        let xs: Vec<f64> = pairs.iter().map(|p| p.cos_sim).collect();
        let ys: Vec<f64> = pairs.iter().map(&y_of).collect();
        if let Ok(Some(r)) = pearson(&xs, &ys) {
            rhos.push(r);
        }
    }
    if rhos.is_empty() {
        None
    } else {
        Some(rhos.iter().sum::<f64>() / rhos.len() as f64)
    }
}

/// Correlation between embedding cosine similarity and predicted-center
/// distance, per image, averaged over the dataset.
pub fn geometry_correlation(model: &Model, data: &[LabeledImage]) -> Result<Option<f64>> {
    let mut per_image = Vec::new();
    for img in data {
        let out = model.forward(&img.image.to_tensor(), false)?;
        per_image.push(token_pairs(&kept_predictions(&out, model.config.num_classes)));
    }
    Ok(mean_per_image_rho(per_image.into_iter(), |p| p.center_dist))
}

/// As [`geometry_correlation`] with classifier-output similarity as Y.
pub fn class_feature_correlation(model: &Model, data: &[LabeledImage]) -> Result<Option<f64>> {
    let mut per_image = Vec::new();
    for img in data {
        let out = model.forward(&img.image.to_tensor(), false)?;
        per_image.push(token_pairs(&kept_predictions(&out, model.config.num_classes)));
    }
    Ok(mean_per_image_rho(per_image.into_iter(), |p| p.cls_feat_sim))
}

/// Size bucket by area terciles of the collected predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScatterPoint {
    pub center: (f64, f64),
    pub size: SizeClass,
}

/// Predicted centers per detection token over a dataset, size-bucketed by
/// dataset-wide area terciles.
pub fn box_scatter(model: &Model, data: &[LabeledImage]) -> Result<Vec<Vec<ScatterPoint>>> {
    let tokens = model.config.det_tokens;
    let mut raw: Vec<Vec<((f64, f64), f64)>> = vec![Vec::new(); tokens];
    let mut all_areas = Vec::new();
    for img in data {
        let out = model.forward(&img.image.to_tensor(), false)?;
        let kept = kept_predictions(&out, model.config.num_classes);
        for (slot, &t) in kept.token_indices.iter().enumerate() {
            raw[t].push((kept.centers[slot], kept.areas[slot]));
            all_areas.push(kept.areas[slot]);
        }
    }
    all_areas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tercile = |q: f64| -> f64 {
        if all_areas.is_empty() {
            0.0
        } else {
            all_areas[(((all_areas.len() as f64) * q) as usize).min(all_areas.len() - 1)]
        }
    };
    let (t1, t2) = (tercile(1.0 / 3.0), tercile(2.0 / 3.0));
    Ok(raw
        .into_iter()
        .map(|points| {
            points
                .into_iter()
                .map(|(center, area)| ScatterPoint {
                    center,
                    size: if area <= t1 {
                        SizeClass::Small
                    } else if area <= t2 {
                        SizeClass::Medium
                    } else {
                        SizeClass::Large
                    },
                })
                .collect()
        })
        .collect())
}

/// Renders one token's scatter as a thumbnail (white canvas, colored dots).
pub fn render_scatter(points: &[ScatterPoint], side: usize) -> Image {
    let mut img = Image::filled(side, side, 3, 1.0);
    for p in points {
        let x = (p.center.0 * (side - 1) as f64).round() as usize;
        let y = (p.center.1 * (side - 1) as f64).round() as usize;
        let color = match p.size {
            SizeClass::Small => [0.1, 0.2, 0.9],
            SizeClass::Medium => [0.1, 0.8, 0.2],
            SizeClass::Large => [0.9, 0.15, 0.1],
        };
        img.set_pixel(y.min(side - 1), x.min(side - 1), &color);
    }
    img
}

#[derive(Clone, Debug, Serialize)]
pub struct CategoryStats {
    /// Ground-truth count per class over the dataset.
    pub gt_histogram: BTreeMap<usize, usize>,
    /// Predicted-class count per token: `per_token[token][class]`.
    pub per_token_histograms: Vec<BTreeMap<usize, usize>>,
    /// Standard deviation of per-token counts, per class.
    pub cross_token_std: BTreeMap<usize, f64>,
}

/// Ground-truth versus per-token prediction category statistics.
pub fn category_stats(model: &Model, data: &[LabeledImage]) -> Result<CategoryStats> {
    let tokens = model.config.det_tokens;
    let mut gt_histogram: BTreeMap<usize, usize> = BTreeMap::new();
    let mut per_token: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); tokens];
    for img in data {
        for o in &img.objects {
            *gt_histogram.entry(o.class_id).or_default() += 1;
        }
        let out = model.forward(&img.image.to_tensor(), false)?;
        let kept = kept_predictions(&out, model.config.num_classes);
        for (slot, &t) in kept.token_indices.iter().enumerate() {
            *per_token[t].entry(kept.classes[slot]).or_default() += 1;
        }
    }
    Ok(CategoryStats {
        cross_token_std: cross_token_std(&per_token, model.config.num_classes),
        gt_histogram,
        per_token_histograms: per_token,
    })
}

/// Null model for the cross-token spread: reassigns every prediction to a
/// uniformly random token and recomputes the per-class standard deviation,
/// averaged over `rounds` shuffles. A category-insensitive detector should
/// sit near this null; a token-specialized classifier sits far above it.
pub fn permutation_null_std(
    per_token: &[BTreeMap<usize, usize>],
    num_classes: usize,
    rounds: usize,
    seed: u64,
) -> BTreeMap<usize, f64> {
    use rand::{Rng, SeedableRng};
    let tokens = per_token.len();
    let mut totals: BTreeMap<usize, usize> = BTreeMap::new();
    for h in per_token {
        for (&c, &n) in h {
            *totals.entry(c).or_default() += n;
        }
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut acc: BTreeMap<usize, f64> = (0..num_classes).map(|c| (c, 0.0)).collect();
    for _ in 0..rounds.max(1) {
        let mut shuffled: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); tokens];
        for (&c, &n) in &totals {
            for _ in 0..n {
                let t = rng.random_range(0..tokens);
                *shuffled[t].entry(c).or_default() += 1;
            }
        }
        for (c, v) in cross_token_std(&shuffled, num_classes) {
            *acc.get_mut(&c).unwrap() += v / rounds.max(1) as f64;
        }
    }
    acc
}

/// Population standard deviation across tokens of each class's count.
pub fn cross_token_std(per_token: &[BTreeMap<usize, usize>], num_classes: usize) -> BTreeMap<usize, f64> {
    let tokens = per_token.len().max(1) as f64;
    let mut out = BTreeMap::new();
    for class in 0..num_classes {
        let counts: Vec<f64> = per_token
            .iter()
            .map(|h| *h.get(&class).unwrap_or(&0) as f64)
            .collect();
        let mean = counts.iter().sum::<f64>() / tokens;
        let var = counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / tokens;
        out.insert(class, var.sqrt());
    }
    out
}

/// Attention rows of every detection token at one layer, restricted to the
/// patch-token columns and reshaped to the patch grid, normalized to [0, 1]
/// for rendering: `maps[head][token]` is a `(grid_rows * grid_cols)` buffer.
pub struct AttentionMaps {
    pub grid: (usize, usize),
    /// `maps[head][token]` in row-major grid order.
    pub maps: Vec<Vec<Vec<f64>>>,
}

pub fn extract_attention(
    model: &Model,
    image: &Tensor,
    layer_index: usize,
) -> Result<AttentionMaps> {
    if layer_index >= model.config.depth {
        return Err(Error::invalid(
            "extract_attention",
            format!("layer {layer_index} out of range for depth {}", model.config.depth),
        ));
    }
    let out = model.forward(image, true)?;
    let attention = out.attention.expect("capture was requested");
    let layer = &attention[layer_index];
    let p = model.config.patch_size;
    let grid = (image.shape()[0] / p, image.shape()[1] / p);
    let n_patches = grid.0 * grid.1;
    let tokens = model.config.det_tokens;

    let mut maps = Vec::with_capacity(layer.len());
    for head in layer {
        let mut per_token = Vec::with_capacity(tokens);
        for t in 0..tokens {
            let row = head.row(n_patches + t);
            let patch_cols = &row[..n_patches];
            let max = patch_cols.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = patch_cols.iter().cloned().fold(f64::INFINITY, f64::min);
            let span = (max - min).max(1e-12);
            per_token.push(patch_cols.iter().map(|&v| (v - min) / span).collect());
        }
        maps.push(per_token);
    }
    Ok(AttentionMaps { grid, maps })
}

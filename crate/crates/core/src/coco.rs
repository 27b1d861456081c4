//! COCO-subset annotation ingestion and the JSON output records.
//!
//! The accepted schema is the minimal detection subset: top-level `images`
//! (id, file_name, width, height), `annotations` (image_id, category_id,
//! bbox as `[x, y, width, height]` in pixels) and `categories` (id, name).
//! Unknown fields are ignored; category ids are remapped densely in
//! ascending original order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::boxes::{BoxCxcywh, GroundTruthObject};
use crate::error::{Error, Result};

/// One image entry plus its normalized objects; pixels are loaded separately
/// via `file_name`.
#[derive(Clone, Debug)]
pub struct AnnotatedImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<GroundTruthObject>,
}

#[derive(Clone, Debug)]
pub struct AnnotationSet {
    pub images: Vec<AnnotatedImage>,
    /// Dense class index -> (original id, name).
    pub categories: Vec<(u64, String)>,
    /// Count of degenerate boxes that were skipped.
    pub skipped_boxes: usize,
}

impl AnnotationSet {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    /// Original category id for a dense class index.
    pub fn original_category_id(&self, class: usize) -> u64 {
        self.categories[class].0
    }
}

fn field<'v>(v: &'v Value, path: &str, key: &str) -> Result<&'v Value> {
    v.get(key)
        .ok_or_else(|| Error::invalid("load_annotations", format!("missing key at {path}.{key}")))
}

fn as_u64(v: &Value, path: &str) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::invalid("load_annotations", format!("{path} must be a non-negative integer")))
}

fn as_f64(v: &Value, path: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::invalid("load_annotations", format!("{path} must be a number")))
}

/// Parses a COCO-subset document from a string.
pub fn parse_annotations(text: &str) -> Result<AnnotationSet> {
    let doc: Value = serde_json::from_str(text)?;
    let images_v = field(&doc, "$", "images")?
        .as_array()
        .ok_or_else(|| Error::invalid("load_annotations", "$.images must be an array"))?;
    let annotations_v = field(&doc, "$", "annotations")?
        .as_array()
        .ok_or_else(|| Error::invalid("load_annotations", "$.annotations must be an array"))?;
    let categories_v = field(&doc, "$", "categories")?
        .as_array()
        .ok_or_else(|| Error::invalid("load_annotations", "$.categories must be an array"))?;

    let mut categories: Vec<(u64, String)> = Vec::new();
    for (i, c) in categories_v.iter().enumerate() {
        let path = format!("$.categories[{i}]");
        let id = as_u64(field(c, &path, "id")?, &format!("{path}.id"))?;
        let name = field(c, &path, "name")?
            .as_str()
            .ok_or_else(|| Error::invalid("load_annotations", format!("{path}.name must be a string")))?
            .to_string();
        categories.push((id, name));
    }
    categories.sort_by_key(|(id, _)| *id);
    let dense: BTreeMap<u64, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (*id, i))
        .collect();

    let mut images: BTreeMap<u64, AnnotatedImage> = BTreeMap::new();
    for (i, im) in images_v.iter().enumerate() {
        let path = format!("$.images[{i}]");
        let id = as_u64(field(im, &path, "id")?, &format!("{path}.id"))?;
        let file_name = field(im, &path, "file_name")?
            .as_str()
            .ok_or_else(|| Error::invalid("load_annotations", format!("{path}.file_name must be a string")))?
            .to_string();
        let width = as_u64(field(im, &path, "width")?, &format!("{path}.width"))? as usize;
        let height = as_u64(field(im, &path, "height")?, &format!("{path}.height"))? as usize;
        if width == 0 || height == 0 {
            return Err(Error::invalid("load_annotations", format!("{path} has a zero dimension")));
        }
        images.insert(
            id,
            AnnotatedImage {
                id,
                file_name,
                width,
                height,
                objects: vec![],
            },
        );
    }

    let mut skipped = 0usize;
    for (i, a) in annotations_v.iter().enumerate() {
        let path = format!("$.annotations[{i}]");
        let image_id = as_u64(field(a, &path, "image_id")?, &format!("{path}.image_id"))?;
        let category_id = as_u64(field(a, &path, "category_id")?, &format!("{path}.category_id"))?;
        let bbox_v = field(a, &path, "bbox")?
            .as_array()
            .ok_or_else(|| Error::invalid("load_annotations", format!("{path}.bbox must be an array")))?;
        if bbox_v.len() != 4 {
            return Err(Error::invalid("load_annotations", format!("{path}.bbox must have 4 entries")));
        }
        let mut b = [0.0f64; 4];
        for (j, val) in bbox_v.iter().enumerate() {
            b[j] = as_f64(val, &format!("{path}.bbox[{j}]"))?;
        }
        let class = *dense
            .get(&category_id)
            .ok_or_else(|| Error::invalid("load_annotations", format!("{path}.category_id {category_id} not in categories")))?;
        let image = images
            .get_mut(&image_id)
            .ok_or_else(|| Error::invalid("load_annotations", format!("{path}.image_id {image_id} not in images")))?;
        if b[2] <= 0.0 || b[3] <= 0.0 {
            skipped += 1;
            continue;
        }
        let (w, h) = (image.width as f64, image.height as f64);
        image.objects.push(GroundTruthObject {
            class_id: class,
            bbox: BoxCxcywh {
                cx: (b[0] + b[2] / 2.0) / w,
                cy: (b[1] + b[3] / 2.0) / h,
                w: b[2] / w,
                h: b[3] / h,
            },
        });
    }

    Ok(AnnotationSet {
        images: images.into_values().collect(),
        categories,
        skipped_boxes: skipped,
    })
}

/// Loads and parses a COCO-subset JSON file.
pub fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    let text = std::fs::read_to_string(path)?;
    parse_annotations(&text)
}

/// Emitted prediction record: pixel-space `[x, y, w, h]` like the input format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Converts normalized detections of one image into prediction records.
pub fn prediction_records(
    image_id: u64,
    size: (usize, usize),
    detections: &[crate::eval::Detection],
    category_ids: Option<&[(u64, String)]>,
) -> Vec<PredictionRecord> {
    let (h, w) = (size.0 as f64, size.1 as f64);
    detections
        .iter()
        .map(|d| {
            let c = d.bbox.corners();
            let category_id = category_ids
                .and_then(|cats| cats.get(d.class_id).map(|(id, _)| *id))
                .unwrap_or(d.class_id as u64);
            PredictionRecord {
                image_id,
                category_id,
                bbox: [c.x1 * w, c.y1 * h, (c.x2 - c.x1) * w, (c.y2 - c.y1) * h],
                score: d.score,
            }
        })
        .collect()
}

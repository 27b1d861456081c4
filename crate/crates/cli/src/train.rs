//! Training loop: batched set-loss optimization with deterministic batch
//! composition, per-image augmentation streams, and worker threads whose
//! gradients are merged in a fixed order so thread count never changes the
//! result.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use yolos_core::autodiff::Tape;
use yolos_core::dataset::{
    gen_shapes_with_offset, multi_scale_sample, random_crop, resize_shortest, LabeledImage,
};
use yolos_core::loss::{assign, set_loss, LossReport};
use yolos_core::model::{Model, Parameters};
use yolos_core::posembed::interpolate_pe;
use yolos_core::tensor::Tensor;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::optim::AdamW;

/// One line of the training log.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub model: Model,
    pub initial: Parameters,
    pub log: Vec<StepLog>,
}

/// Raised when the loss goes non-finite; carries the last finite state.
#[derive(Debug)]
pub struct NonFiniteLoss {
    pub step: usize,
    pub last_good: Box<Parameters>,
}

impl std::fmt::Display for NonFiniteLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "non-finite loss at step {}", self.step)
    }
}

impl std::error::Error for NonFiniteLoss {}

/// Held-out split ids start here so train/eval never overlap.
pub const EVAL_ID_OFFSET: u64 = 1_000_000;

pub fn build_train_dataset(cfg: &RunConfig) -> Result<Vec<LabeledImage>> {
    if cfg.data.source == "synthetic" {
        Ok(gen_shapes_with_offset(
            cfg.seed,
            0,
            cfg.data.train_images,
            cfg.data.canvas,
            cfg.data.max_objects,
            cfg.model.num_classes,
        )?)
    } else {
        load_annotated(Path::new(&cfg.data.source))
    }
}

pub fn build_eval_dataset(cfg: &RunConfig) -> Result<Vec<LabeledImage>> {
    if cfg.data.source == "synthetic" {
        Ok(gen_shapes_with_offset(
            cfg.seed,
            EVAL_ID_OFFSET,
            cfg.data.eval_images,
            cfg.data.canvas,
            cfg.data.max_objects,
            cfg.model.num_classes,
        )?)
    } else {
        load_annotated(Path::new(&cfg.data.source))
    }
}

/// Loads a COCO-subset JSON plus the image files it references (PPM or PNG,
/// relative to the JSON's directory).
pub fn load_annotated(path: &Path) -> Result<Vec<LabeledImage>> {
    let set = yolos_core::coco::load_annotations(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    set.images
        .iter()
        .map(|a| {
            let image = yolos_core::ppm::read_image(&dir.join(&a.file_name))
                .with_context(|| format!("loading {}", a.file_name))?;
            Ok(LabeledImage {
                image,
                objects: a.objects.clone(),
                id: a.id,
            })
        })
        .collect()
}

/// Augmentation stream for one (step, image) pair: independent of worker
/// scheduling, so any thread count reproduces the same batch content.
fn augmentation_rng(seed: u64, step: usize, image_id: u64) -> ChaCha8Rng {
    let mix = seed
        ^ image_id.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    ChaCha8Rng::seed_from_u64(mix)
}

fn augment(cfg: &RunConfig, step: usize, sample: &LabeledImage) -> LabeledImage {
    let mut rng = augmentation_rng(cfg.seed, step, sample.id);
    let mut current = if cfg.data.random_crop {
        random_crop(&mut rng, sample)
    } else {
        sample.clone()
    };
    let p = cfg.model.patch_size;
    if cfg.data.multi_scale_min > 0 && cfg.data.multi_scale_max >= cfg.data.multi_scale_min {
        let short = multi_scale_sample(&mut rng, cfg.data.multi_scale_min, cfg.data.multi_scale_max, p);
        let long_max = if cfg.data.long_max == 0 { usize::MAX / 2 } else { cfg.data.long_max };
        current = resize_shortest(&current, short, long_max, p);
    } else if current.image.height % p != 0 || current.image.width % p != 0 {
        current = resize_shortest(
            &current,
            current.image.height.min(current.image.width),
            usize::MAX / 2,
            p,
        );
    }
    current
}

struct ImageStep {
    report: LossReport,
    grads: Vec<Tensor>,
}

fn image_step(model: &Model, cfg: &RunConfig, sample: &LabeledImage) -> Result<ImageStep> {
    let image = sample.image.to_tensor();
    let tape = Tape::new();
    let fg = model.forward_graph(&tape, &image, false)?;
    // Saturated sigmoids produce exact zero-width boxes; both that and
    // non-finite outputs mean the run has diverged.
    let boxes_degenerate = {
        let b = fg.boxes.value();
        (0..b.shape()[0]).any(|r| b.at2(r, 2) <= 0.0 || b.at2(r, 3) <= 0.0)
    };
    if !fg.class_logits.value().is_finite() || !fg.boxes.value().is_finite() || boxes_degenerate {
        // Diverged forward pass; the step loop turns this into an abort.
        return Ok(ImageStep {
            report: LossReport {
                total: f64::NAN,
                class_term: f64::NAN,
                l1_term: f64::NAN,
                giou_term: f64::NAN,
                weights: cfg.loss,
            },
            grads: vec![],
        });
    }
    let matching = assign(
        &fg.class_logits.value(),
        &fg.boxes.value(),
        &sample.objects,
        &cfg.loss,
    )?;
    let (total, report) = set_loss(
        fg.class_logits,
        fg.boxes,
        &sample.objects,
        &matching,
        &cfg.loss,
        cfg.no_object_weight,
    )?;
    let grads = tape.backward(total)?;
    let out = fg
        .leaves
        .iter()
        .map(|(_, var)| grads.expect(*var).clone())
        .collect();
    Ok(ImageStep {
        report,
        grads: out,
    })
}

fn worker_count(cfg: &RunConfig, batch: usize) -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let requested = if cfg.threads == 0 { available } else { cfg.threads };
    requested.clamp(1, batch.max(1))
}

/// Runs the full training loop. `on_step` receives every log record as it
/// is produced (the command layer streams it to the log file).
pub fn train(
    cfg: &RunConfig,
    init_from: Option<&Path>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainResult> {
    cfg.validate()?;
    let dataset = build_train_dataset(cfg)?;
    if dataset.is_empty() {
        bail!("train: empty dataset");
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let mut model = match init_from {
        None => Model::init(cfg.model.clone(), &mut init_rng)?,
        Some(path) => {
            // Warm start: encoder weights come from the checkpoint, heads and
            // detection tokens are always re-initialized fresh.
            let (ckpt_cfg, mut params) = checkpoint::load(path)?;
            if ckpt_cfg.width != cfg.model.width
                || ckpt_cfg.depth != cfg.model.depth
                || ckpt_cfg.heads != cfg.model.heads
                || ckpt_cfg.patch_size != cfg.model.patch_size
                || ckpt_cfg.det_tokens != cfg.model.det_tokens
                || ckpt_cfg.num_classes != cfg.model.num_classes
            {
                bail!("train: checkpoint architecture {ckpt_cfg:?} does not match the configured model");
            }
            if ckpt_cfg.pe_grid != cfg.model.pe_grid {
                params.pe_first = interpolate_pe(&params.pe_first, cfg.model.pe_grid)?;
                for pe in &mut params.pe_intermediate {
                    *pe = interpolate_pe(pe, cfg.model.pe_grid)?;
                }
            }
            params.reinit_heads_and_tokens(&cfg.model, &mut init_rng);
            Model::new(cfg.model.clone(), params)?
        }
    };
    let initial = model.params.clone();

    let mut optimizer = AdamW::new(cfg.optimizer.learning_rate, cfg.optimizer.weight_decay);
    optimizer.beta2 = cfg.optimizer.beta2;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xBA7C));
    let frozen: Vec<&str> = if cfg.detach_det_tokens { vec!["det_tokens"] } else { vec![] };

    let mut log = Vec::with_capacity(cfg.optimizer.total_steps);
    let batch_size = cfg.optimizer.batch_size;
    let workers = worker_count(cfg, batch_size);

    for step in 0..cfg.optimizer.total_steps {
        let lr = optimizer.cosine_lr(step, cfg.optimizer.total_steps);
        let batch: Vec<&LabeledImage> = (0..batch_size)
            .map(|_| &dataset[batch_rng.random_range(0..dataset.len())])
            .collect();

        // Per-image passes fan out across workers; slot order fixes the merge.
        let mut slots: Vec<Option<Result<ImageStep>>> = Vec::with_capacity(batch_size);
        slots.resize_with(batch_size, || None);
        let model_ref = &model;
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (w, chunk) in slot_chunks(&mut slots, workers).into_iter().enumerate() {
                let batch = &batch;
                handles.push(scope.spawn(move || {
                    for (local, slot) in chunk {
                        let idx = w + local * workers;
                        let sample = augment(cfg, step, batch[idx]);
                        *slot = Some(image_step(model_ref, cfg, &sample));
                    }
                }));
            }
            for h in handles {
                h.join().expect("worker panicked");
            }
        });

        let mut grad_sum: Option<Vec<Tensor>> = None;
        let mut totals = (0.0, 0.0, 0.0, 0.0);
        for slot in slots {
            let ImageStep { report, grads } = slot.expect("all slots filled")?;
            totals.0 += report.total;
            totals.1 += report.class_term;
            totals.2 += report.l1_term;
            totals.3 += report.giou_term;
            match &mut grad_sum {
                None => grad_sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let inv_b = 1.0 / batch_size as f64;
        let record = StepLog {
            step,
            total: totals.0 * inv_b,
            cls: totals.1 * inv_b,
            l1: totals.2 * inv_b,
            giou: totals.3 * inv_b,
            lr,
        };
        if !record.total.is_finite() {
            return Err(anyhow::Error::new(NonFiniteLoss {
                step,
                last_good: Box::new(model.params.clone()),
            }));
        }

        let mut grads = grad_sum.expect("non-empty batch");
        for g in &mut grads {
            for x in g.data_mut() {
                *x *= inv_b;
            }
        }
        let names: Vec<String> = model.params.named().iter().map(|(n, _)| n.clone()).collect();
        let grads_named: Vec<(String, Tensor)> = names.into_iter().zip(grads).collect();
        let mut params = model.params.named_mut();
        optimizer.update(&mut params, &grads_named, lr, &frozen);

        on_step(&record);
        log.push(record);
    }

    Ok(TrainResult {
        model,
        initial,
        log,
    })
}

/// Splits mutable slots into `workers` interleaved chunks: worker `w` owns
/// slots `w, w + workers, w + 2*workers, ..`.
fn slot_chunks<'a, T>(slots: &'a mut [Option<T>], workers: usize) -> Vec<Vec<(usize, &'a mut Option<T>)>> {
    let mut chunks: Vec<Vec<(usize, &mut Option<T>)>> = Vec::new();
    chunks.resize_with(workers, Vec::new);
    for (i, slot) in slots.iter_mut().enumerate() {
        chunks[i % workers].push((i / workers, slot));
    }
    chunks
}

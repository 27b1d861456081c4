//! Run configuration: flat `key = value` files with dotted keys and `#`
//! comments, overridable from the command line. The format needs no parser
//! beyond line splitting, so any tooling language can read and write it.

use std::path::Path;

use anyhow::{bail, Context, Result};
use yolos_core::loss::LossWeights;
use yolos_core::model::{ModelConfig, PeScheme};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Cosine decay over this many steps (the only schedule).
    pub total_steps: usize,
    pub batch_size: usize,
    /// Second-moment decay; smaller adapts faster on short runs.
    pub beta2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// "synthetic" or a path to a COCO-subset JSON file.
    pub source: String,
    pub canvas: (usize, usize),
    pub train_images: usize,
    pub eval_images: usize,
    pub max_objects: usize,
    /// Multi-scale shorter-side range; equal values disable resizing.
    pub multi_scale_min: usize,
    pub multi_scale_max: usize,
    pub long_max: usize,
    pub random_crop: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub loss: LossWeights,
    pub no_object_weight: f64,
    pub seed: u64,
    pub detach_det_tokens: bool,
    pub out: String,
    pub threads: usize,
}

impl Default for RunConfig {
    /// The "nano" toy defaults: small enough that a full training run
    /// finishes on a laptop CPU in minutes.
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                depth: 4,
                width: 64,
                heads: 4,
                patch_size: 8,
                det_tokens: 16,
                num_classes: 3,
                mlp_ratio: 4.0,
                pe_scheme: PeScheme::TypeII,
                pe_grid: (8, 8),
                image_channels: 3,
            },
            optimizer: OptimizerConfig {
                // The published detection rate (2.5e-5) is a full-scale
                // setting; the toy default trades fidelity for convergence.
                learning_rate: 1e-4,
                weight_decay: 1e-4,
                total_steps: 2000,
                batch_size: 8,
                beta2: 0.999,
            },
            data: DataConfig {
                source: "synthetic".into(),
                canvas: (64, 64),
                train_images: 2000,
                eval_images: 200,
                max_objects: 3,
                multi_scale_min: 0,
                multi_scale_max: 0,
                long_max: 0,
                random_crop: false,
            },
            loss: LossWeights::default(),
            no_object_weight: yolos_core::loss::DEFAULT_NO_OBJECT_WEIGHT,
            seed: 42,
            detach_det_tokens: false,
            out: "runs/out".into(),
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(anyhow::Error::from)?;
        // total_steps = 0 is allowed: it materializes an init-only checkpoint.
        if self.optimizer.batch_size == 0 {
            bail!("config: optimizer.batch_size must be at least 1");
        }
        Ok(())
    }

    /// Applies one dotted `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let parse_usize = || v.parse::<usize>().with_context(|| format!("{key}: bad integer {v:?}"));
        let parse_f64 = || v.parse::<f64>().with_context(|| format!("{key}: bad number {v:?}"));
        let parse_bool = || match v {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => bail!("{key}: bad boolean {v:?}"),
        };
        let parse_pair = || -> Result<(usize, usize)> {
            let (a, b) = v
                .split_once('x')
                .with_context(|| format!("{key}: expected ROWSxCOLS, got {v:?}"))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        };
        match key {
            "model.depth" => self.model.depth = parse_usize()?,
            "model.width" => self.model.width = parse_usize()?,
            "model.heads" => self.model.heads = parse_usize()?,
            "model.patch_size" => self.model.patch_size = parse_usize()?,
            "model.det_tokens" => self.model.det_tokens = parse_usize()?,
            "model.num_classes" => self.model.num_classes = parse_usize()?,
            "model.mlp_ratio" => self.model.mlp_ratio = parse_f64()?,
            "model.pe_scheme" => {
                self.model.pe_scheme = match v {
                    "type1" => PeScheme::TypeI,
                    "type2" => PeScheme::TypeII,
                    _ => bail!("model.pe_scheme: expected type1 or type2, got {v:?}"),
                }
            }
            "model.pe_grid" => self.model.pe_grid = parse_pair()?,
            "model.image_channels" => self.model.image_channels = parse_usize()?,
            "optimizer.learning_rate" => self.optimizer.learning_rate = parse_f64()?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = parse_f64()?,
            "optimizer.total_steps" => self.optimizer.total_steps = parse_usize()?,
            "optimizer.batch_size" => self.optimizer.batch_size = parse_usize()?,
            "optimizer.beta2" => self.optimizer.beta2 = parse_f64()?,
            "data.source" => self.data.source = v.to_string(),
            "data.canvas" => self.data.canvas = parse_pair()?,
            "data.train_images" => self.data.train_images = parse_usize()?,
            "data.eval_images" => self.data.eval_images = parse_usize()?,
            "data.max_objects" => self.data.max_objects = parse_usize()?,
            "data.multi_scale_min" => self.data.multi_scale_min = parse_usize()?,
            "data.multi_scale_max" => self.data.multi_scale_max = parse_usize()?,
            "data.long_max" => self.data.long_max = parse_usize()?,
            "data.random_crop" => self.data.random_crop = parse_bool()?,
            "loss.class_weight" => self.loss.class_weight = parse_f64()?,
            "loss.l1_weight" => self.loss.l1_weight = parse_f64()?,
            "loss.giou_weight" => self.loss.giou_weight = parse_f64()?,
            "loss.no_object_weight" => self.no_object_weight = parse_f64()?,
            "seed" => self.seed = v.parse().with_context(|| format!("seed: bad integer {v:?}"))?,
            "detach_det_tokens" => self.detach_det_tokens = parse_bool()?,
            "out" => self.out = v.to_string(),
            "threads" => self.threads = parse_usize()?,
            _ => bail!("config: unknown key {key:?}"),
        }
        Ok(())
    }

    /// Parses a config document; later lines override earlier ones.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("config line {}: expected key = value, got {raw:?}", lineno + 1))?;
            self.set(key.trim(), value)
                .with_context(|| format!("config line {}", lineno + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes every key; `load` of the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.optimizer;
        let d = &self.data;
        format!(
            "model.depth = {}\nmodel.width = {}\nmodel.heads = {}\nmodel.patch_size = {}\n\
             model.det_tokens = {}\nmodel.num_classes = {}\nmodel.mlp_ratio = {}\n\
             model.pe_scheme = {}\nmodel.pe_grid = {}x{}\nmodel.image_channels = {}\n\
             optimizer.learning_rate = {}\noptimizer.weight_decay = {}\n\
             optimizer.total_steps = {}\noptimizer.batch_size = {}\noptimizer.beta2 = {}\n\
             data.source = {}\ndata.canvas = {}x{}\ndata.train_images = {}\ndata.eval_images = {}\n\
             data.max_objects = {}\ndata.multi_scale_min = {}\ndata.multi_scale_max = {}\n\
             data.long_max = {}\ndata.random_crop = {}\n\
             loss.class_weight = {}\nloss.l1_weight = {}\nloss.giou_weight = {}\n\
             loss.no_object_weight = {}\nseed = {}\ndetach_det_tokens = {}\nout = {}\nthreads = {}\n",
            m.depth,
            m.width,
            m.heads,
            m.patch_size,
            m.det_tokens,
            m.num_classes,
            m.mlp_ratio,
            match m.pe_scheme {
                PeScheme::TypeI => "type1",
                PeScheme::TypeII => "type2",
            },
            m.pe_grid.0,
            m.pe_grid.1,
            m.image_channels,
            o.learning_rate,
            o.weight_decay,
            o.total_steps,
            o.batch_size,
            o.beta2,
            d.source,
            d.canvas.0,
            d.canvas.1,
            d.train_images,
            d.eval_images,
            d.max_objects,
            d.multi_scale_min,
            d.multi_scale_max,
            d.long_max,
            d.random_crop,
            self.loss.class_weight,
            self.loss.l1_weight,
            self.loss.giou_weight,
            self.no_object_weight,
            self.seed,
            self.detach_det_tokens,
            self.out,
            self.threads,
        )
    }
}

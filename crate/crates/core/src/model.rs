//! Encoder-only detection transformer.
//!
//! The stem flattens fixed-size image patches and projects them to the
//! embedding width; learnable detection tokens are appended to the patch
//! sequence; a stack of pre-norm encoder layers runs global self-attention
//! over all tokens; two small MLP heads read the final detection-token
//! embeddings and emit class logits and sigmoid-normalized boxes in parallel.
//! Patch-token outputs never reach the heads.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::posembed::{resize_row_weights, PePlacement, PositionEmbedding};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Positional-embedding scheme selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeScheme {
    /// Per-layer embeddings: interpolated first layer plus fresh intermediates.
    TypeI,
    /// One first-layer embedding stored at (or above) the training grid.
    TypeII,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Encoder layer count.
    pub depth: usize,
    /// Embedding width.
    pub width: usize,
    pub heads: usize,
    /// Patch side length in pixels.
    pub patch_size: usize,
    /// Number of detection tokens appended to the patch sequence.
    pub det_tokens: usize,
    /// Foreground classes; the class head emits `num_classes + 1` logits.
    pub num_classes: usize,
    /// MLP hidden width as a multiple of `width`.
    pub mlp_ratio: f64,
    pub pe_scheme: PeScheme,
    /// Stored positional grid (rows, cols); inputs at other grids are
    /// resampled on the fly.
    pub pe_grid: (usize, usize),
    pub image_channels: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("config", "depth must be at least 1"));
        }
        if self.det_tokens == 0 {
            return Err(Error::invalid("config", "at least one detection token required"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(
                "config",
                format!("width {} must be divisible by heads {}", self.width, self.heads),
            ));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::invalid("config", "mlp_ratio must be positive"));
        }
        if self.patch_size == 0 || self.pe_grid.0 == 0 || self.pe_grid.1 == 0 {
            return Err(Error::invalid("config", "patch size and grid must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.width as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image_channels
    }
}

/// Weight plus bias of one linear layer; weights are `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Xavier-scaled truncated normal. The fixed-std pre-training convention
    /// leaves attention logits so small at this scale that the q/k pathway
    /// never leaves the uniform regime within a desk-scale budget; Glorot
    /// scaling (DETR's choice for its from-scratch transformer) keeps the
    /// logit variance healthy from the first step.
    fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (inputs + outputs) as f64).sqrt();
        Linear {
            weight: Tensor::trunc_normal(&[inputs, outputs], std, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    fn apply<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(tape.leaf(self.weight.clone()), tape.leaf(self.bias.clone()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_scale: Tensor,
    pub ln1_bias: Tensor,
    /// Fused query/key/value projection, `(width, 3 * width)`.
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2_scale: Tensor,
    pub ln2_bias: Tensor,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl LayerParams {
    fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d, h) = (cfg.width, cfg.mlp_hidden());
        LayerParams {
            ln1_scale: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            qkv: Linear::init(d, 3 * d, rng),
            proj: Linear::init(d, d, rng),
            ln2_scale: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            fc1: Linear::init(d, h, rng),
            fc2: Linear::init(h, d, rng),
        }
    }
}

/// Two-hidden-layer MLP head with ReLU between the linear layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

impl MlpHead {
    fn init(width: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        MlpHead {
            fc1: Linear::init(width, width, rng),
            fc2: Linear::init(width, width, rng),
            fc3: Linear::init(width, outputs, rng),
        }
    }
}

/// All trainable detection parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub patch_embed: Linear,
    /// `(det_tokens, width)` learnable token embeddings.
    pub det_tokens: Tensor,
    pub pe_first: PositionEmbedding,
    /// Per-intermediate-layer embeddings (`depth - 1` entries when the
    /// scheme adds them, empty otherwise).
    pub pe_intermediate: Vec<PositionEmbedding>,
    pub layers: Vec<LayerParams>,
    pub final_ln_scale: Tensor,
    pub final_ln_bias: Tensor,
    pub class_head: MlpHead,
    pub box_head: MlpHead,
}

impl Parameters {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let placement = match cfg.pe_scheme {
            PeScheme::TypeI => PePlacement::EveryLayer,
            PeScheme::TypeII => PePlacement::FirstLayerOnly,
        };
        let pe_first = PositionEmbedding::random(cfg.pe_grid, cfg.det_tokens, d, placement, rng);
        let pe_intermediate = match cfg.pe_scheme {
            PeScheme::TypeI => (1..cfg.depth)
                .map(|_| PositionEmbedding::random(cfg.pe_grid, cfg.det_tokens, d, PePlacement::EveryLayer, rng))
                .collect(),
            PeScheme::TypeII => vec![],
        };
        Ok(Parameters {
            patch_embed: Linear::init(cfg.patch_dim(), d, rng),
            det_tokens: Tensor::trunc_normal(&[cfg.det_tokens, d], INIT_STD, rng),
            pe_first,
            pe_intermediate,
            layers: (0..cfg.depth).map(|_| LayerParams::init(cfg, rng)).collect(),
            final_ln_scale: Tensor::full(&[d], 1.0),
            final_ln_bias: Tensor::zeros(&[d]),
            class_head: MlpHead::init(d, cfg.num_classes + 1, rng),
            box_head: MlpHead::init(d, 4, rng),
        })
    }

    /// Re-initializes the parts that never come from a warm start: both MLP
    /// heads and the detection-token embeddings.
    pub fn reinit_heads_and_tokens(&mut self, cfg: &ModelConfig, rng: &mut impl Rng) {
        self.det_tokens = Tensor::trunc_normal(&[cfg.det_tokens, cfg.width], INIT_STD, rng);
        self.class_head = MlpHead::init(cfg.width, cfg.num_classes + 1, rng);
        self.box_head = MlpHead::init(cfg.width, 4, rng);
    }

    /// Stable `(name, tensor)` listing used by the optimizer and checkpoints.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("patch_embed.weight".into(), &self.patch_embed.weight));
        out.push(("patch_embed.bias".into(), &self.patch_embed.bias));
        out.push(("det_tokens".into(), &self.det_tokens));
        out.push(("pe.first".into(), &self.pe_first.values));
        for (i, pe) in self.pe_intermediate.iter().enumerate() {
            out.push((format!("pe.mid.{i}"), &pe.values));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln1.scale"), &l.ln1_scale));
            out.push((format!("layers.{i}.ln1.bias"), &l.ln1_bias));
            out.push((format!("layers.{i}.qkv.weight"), &l.qkv.weight));
            out.push((format!("layers.{i}.qkv.bias"), &l.qkv.bias));
            out.push((format!("layers.{i}.proj.weight"), &l.proj.weight));
            out.push((format!("layers.{i}.proj.bias"), &l.proj.bias));
            out.push((format!("layers.{i}.ln2.scale"), &l.ln2_scale));
            out.push((format!("layers.{i}.ln2.bias"), &l.ln2_bias));
            out.push((format!("layers.{i}.mlp.fc1.weight"), &l.fc1.weight));
            out.push((format!("layers.{i}.mlp.fc1.bias"), &l.fc1.bias));
            out.push((format!("layers.{i}.mlp.fc2.weight"), &l.fc2.weight));
            out.push((format!("layers.{i}.mlp.fc2.bias"), &l.fc2.bias));
        }
        out.push(("final_ln.scale".into(), &self.final_ln_scale));
        out.push(("final_ln.bias".into(), &self.final_ln_bias));
        for (head, name) in [(&self.class_head, "class_head"), (&self.box_head, "box_head")] {
            out.push((format!("{name}.fc1.weight"), &head.fc1.weight));
            out.push((format!("{name}.fc1.bias"), &head.fc1.bias));
            out.push((format!("{name}.fc2.weight"), &head.fc2.weight));
            out.push((format!("{name}.fc2.bias"), &head.fc2.bias));
            out.push((format!("{name}.fc3.weight"), &head.fc3.weight));
            out.push((format!("{name}.fc3.bias"), &head.fc3.bias));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("patch_embed.weight".into(), &mut self.patch_embed.weight));
        out.push(("patch_embed.bias".into(), &mut self.patch_embed.bias));
        out.push(("det_tokens".into(), &mut self.det_tokens));
        out.push(("pe.first".into(), &mut self.pe_first.values));
        for (i, pe) in self.pe_intermediate.iter_mut().enumerate() {
            out.push((format!("pe.mid.{i}"), &mut pe.values));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.ln1.scale"), &mut l.ln1_scale));
            out.push((format!("layers.{i}.ln1.bias"), &mut l.ln1_bias));
            out.push((format!("layers.{i}.qkv.weight"), &mut l.qkv.weight));
            out.push((format!("layers.{i}.qkv.bias"), &mut l.qkv.bias));
            out.push((format!("layers.{i}.proj.weight"), &mut l.proj.weight));
            out.push((format!("layers.{i}.proj.bias"), &mut l.proj.bias));
            out.push((format!("layers.{i}.ln2.scale"), &mut l.ln2_scale));
            out.push((format!("layers.{i}.ln2.bias"), &mut l.ln2_bias));
            out.push((format!("layers.{i}.mlp.fc1.weight"), &mut l.fc1.weight));
            out.push((format!("layers.{i}.mlp.fc1.bias"), &mut l.fc1.bias));
            out.push((format!("layers.{i}.mlp.fc2.weight"), &mut l.fc2.weight));
            out.push((format!("layers.{i}.mlp.fc2.bias"), &mut l.fc2.bias));
        }
        out.push(("final_ln.scale".into(), &mut self.final_ln_scale));
        out.push(("final_ln.bias".into(), &mut self.final_ln_bias));
        for (head, name) in [
            (&mut self.class_head, "class_head"),
            (&mut self.box_head, "box_head"),
        ] {
            out.push((format!("{name}.fc1.weight"), &mut head.fc1.weight));
            out.push((format!("{name}.fc1.bias"), &mut head.fc1.bias));
            out.push((format!("{name}.fc2.weight"), &mut head.fc2.weight));
            out.push((format!("{name}.fc2.bias"), &mut head.fc2.bias));
            out.push((format!("{name}.fc3.weight"), &mut head.fc3.weight));
            out.push((format!("{name}.fc3.bias"), &mut head.fc3.bias));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Pure-data prediction set for one image.
#[derive(Clone, Debug)]
pub struct DetectionOutput {
    /// `(det_tokens, 4)` normalized center-form boxes in (0,1).
    pub boxes: Tensor,
    /// `(det_tokens, num_classes + 1)` raw logits; last class is "no object".
    pub class_logits: Tensor,
    /// `(det_tokens, width)` final-layer embeddings, kept for analysis.
    pub det_embeddings: Tensor,
    /// Per-layer, per-head attention rows when capture was requested:
    /// `attention[layer][head]` is the full `(S, S)` row-softmax matrix.
    pub attention: Option<Vec<Vec<Tensor>>>,
}

/// Graph handles for the current forward pass, used to attach the loss.
pub struct ForwardGraph<'t> {
    pub class_logits: Var<'t>,
    pub boxes: Var<'t>,
    pub det_embeddings: Var<'t>,
    pub attention: Option<Vec<Vec<Tensor>>>,
    /// Leaves in `Parameters::named` order, for gradient readout.
    pub leaves: Vec<(String, Var<'t>)>,
}

/// Splits an `(H, W, C)` image tensor into a raster-ordered sequence of
/// flattened `P x P` patches; flattening inside a patch is row-major over
/// (row, col, channel).
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::invalid("patchify", format!("image must be rank 3, got {:?}", image.shape())));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(
            "patchify",
            format!("image {h}x{w} not divisible by patch {patch}; pad first"),
        ));
    }
    let (gr, gc) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let mut out = vec![0.0; gr * gc * pd];
    for py in 0..gr {
        for px in 0..gc {
            let dst = &mut out[(py * gc + px) * pd..(py * gc + px + 1) * pd];
            for r in 0..patch {
                let src_row = (py * patch + r) * w * c + px * patch * c;
                dst[r * patch * c..(r + 1) * patch * c]
                    .copy_from_slice(&image.data()[src_row..src_row + patch * c]);
            }
        }
    }
    Tensor::from_vec(vec![gr * gc, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(seq: &Tensor, h: usize, w: usize, c: usize, patch: usize) -> Result<Tensor> {
    let (gr, gc) = (h / patch, w / patch);
    let pd = patch * patch * c;
    if seq.rank() != 2 || seq.shape() != [gr * gc, pd] {
        return Err(Error::invalid("unpatchify", format!("sequence shape {:?} does not match {h}x{w}x{c}/{patch}", seq.shape())));
    }
    let mut out = vec![0.0; h * w * c];
    for py in 0..gr {
        for px in 0..gc {
            let src = seq.row(py * gc + px);
            for r in 0..patch {
                let dst_row = (py * patch + r) * w * c + px * patch * c;
                out[dst_row..dst_row + patch * c].copy_from_slice(&src[r * patch * c..(r + 1) * patch * c]);
            }
        }
    }
    Tensor::from_vec(vec![h, w, c], out)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

struct LayerLeaves<'t> {
    ln1_scale: Var<'t>,
    ln1_bias: Var<'t>,
    qkv_w: Var<'t>,
    qkv_b: Var<'t>,
    proj_w: Var<'t>,
    proj_b: Var<'t>,
    ln2_scale: Var<'t>,
    ln2_bias: Var<'t>,
    fc1_w: Var<'t>,
    fc1_b: Var<'t>,
    fc2_w: Var<'t>,
    fc2_b: Var<'t>,
}

impl Model {
    pub fn new(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        Ok(Model { config, params })
    }

    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = Parameters::init(&config, rng)?;
        Ok(Model { config, params })
    }

    /// Inference entry point: fresh tape, data-only outputs.
    pub fn forward(&self, image: &Tensor, capture_attention: bool) -> Result<DetectionOutput> {
        let tape = Tape::new();
        let g = self.forward_graph(&tape, image, capture_attention)?;
        Ok(DetectionOutput {
            boxes: (*g.boxes.value()).clone(),
            class_logits: (*g.class_logits.value()).clone(),
            det_embeddings: (*g.det_embeddings.value()).clone(),
            attention: g.attention,
        })
    }

    /// Full differentiable forward pass on a caller-owned tape.
    pub fn forward_graph<'t>(
        &self,
        tape: &'t Tape,
        image: &Tensor,
        capture_attention: bool,
    ) -> Result<ForwardGraph<'t>> {
        let cfg = &self.config;
        let p = &self.params;
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let grid = (h / cfg.patch_size, w / cfg.patch_size);
        let patches = patchify(image, cfg.patch_size)?;
        let n_patches = patches.shape()[0];

        let mut leaves: Vec<(String, Var<'t>)> = Vec::new();
        let mut leaf = |name: &str, t: &Tensor| {
            let v = tape.leaf(t.clone());
            leaves.push((name.to_string(), v));
            v
        };

        let pe_w = leaf("patch_embed.weight", &p.patch_embed.weight);
        let pe_b = leaf("patch_embed.bias", &p.patch_embed.bias);
        let det = leaf("det_tokens", &p.det_tokens);
        let pe_first = leaf("pe.first", &p.pe_first.values);
        let pe_mid: Vec<Var<'t>> = p
            .pe_intermediate
            .iter()
            .enumerate()
            .map(|(i, pe)| leaf(&format!("pe.mid.{i}"), &pe.values))
            .collect();
        let layer_leaves: Vec<LayerLeaves<'t>> = p
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerLeaves {
                ln1_scale: leaf(&format!("layers.{i}.ln1.scale"), &l.ln1_scale),
                ln1_bias: leaf(&format!("layers.{i}.ln1.bias"), &l.ln1_bias),
                qkv_w: leaf(&format!("layers.{i}.qkv.weight"), &l.qkv.weight),
                qkv_b: leaf(&format!("layers.{i}.qkv.bias"), &l.qkv.bias),
                proj_w: leaf(&format!("layers.{i}.proj.weight"), &l.proj.weight),
                proj_b: leaf(&format!("layers.{i}.proj.bias"), &l.proj.bias),
                ln2_scale: leaf(&format!("layers.{i}.ln2.scale"), &l.ln2_scale),
                ln2_bias: leaf(&format!("layers.{i}.ln2.bias"), &l.ln2_bias),
                fc1_w: leaf(&format!("layers.{i}.mlp.fc1.weight"), &l.fc1.weight),
                fc1_b: leaf(&format!("layers.{i}.mlp.fc1.bias"), &l.fc1.bias),
                fc2_w: leaf(&format!("layers.{i}.mlp.fc2.weight"), &l.fc2.weight),
                fc2_b: leaf(&format!("layers.{i}.mlp.fc2.bias"), &l.fc2.bias),
            })
            .collect();
        let final_scale = leaf("final_ln.scale", &p.final_ln_scale);
        let final_bias = leaf("final_ln.bias", &p.final_ln_bias);
        let ch = [
            leaf("class_head.fc1.weight", &p.class_head.fc1.weight),
            leaf("class_head.fc1.bias", &p.class_head.fc1.bias),
            leaf("class_head.fc2.weight", &p.class_head.fc2.weight),
            leaf("class_head.fc2.bias", &p.class_head.fc2.bias),
            leaf("class_head.fc3.weight", &p.class_head.fc3.weight),
            leaf("class_head.fc3.bias", &p.class_head.fc3.bias),
        ];
        let bh = [
            leaf("box_head.fc1.weight", &p.box_head.fc1.weight),
            leaf("box_head.fc1.bias", &p.box_head.fc1.bias),
            leaf("box_head.fc2.weight", &p.box_head.fc2.weight),
            leaf("box_head.fc2.bias", &p.box_head.fc2.bias),
            leaf("box_head.fc3.weight", &p.box_head.fc3.weight),
            leaf("box_head.fc3.bias", &p.box_head.fc3.bias),
        ];

        // Stem: project patches, append detection tokens, add interpolated PE.
        let x = tape.constant(patches);
        let embedded = x.linear(pe_w, pe_b)?;
        let mut z = tape.concat(&[embedded, det], 0)?;
        z = z.add(resized_pe(pe_first, &p.pe_first, grid, cfg.det_tokens)?)?;

        let mut attention = if capture_attention { Some(Vec::new()) } else { None };
        for (i, ll) in layer_leaves.iter().enumerate() {
            if i > 0 {
                if let Some(pe) = p.pe_intermediate.get(i - 1) {
                    z = z.add(resized_pe(pe_mid[i - 1], pe, grid, cfg.det_tokens)?)?;
                }
            }
            let (z_next, heads) = self.encoder_layer(tape, z, ll, capture_attention)?;
            z = z_next;
            if let Some(maps) = attention.as_mut() {
                maps.push(heads);
            }
        }

        let encoded = z.layernorm_affine(LAYERNORM_EPS, final_scale, final_bias)?;
        // Only the detection-token rows reach the heads.
        let det_embeddings = encoded.slice(0, n_patches, n_patches + cfg.det_tokens)?;

        let mlp_head = |h: &[Var<'t>; 6], x: Var<'t>| -> Result<Var<'t>> {
            let y = x.linear(h[0], h[1])?.relu();
            let y = y.linear(h[2], h[3])?.relu();
            y.linear(h[4], h[5])
        };
        let class_logits = mlp_head(&ch, det_embeddings)?;
        let boxes = mlp_head(&bh, det_embeddings)?.sigmoid();

        Ok(ForwardGraph {
            class_logits,
            boxes,
            det_embeddings,
            attention,
            leaves,
        })
    }

    /// One pre-norm encoder layer:
    /// `z' = MSA(LN(z)) + z`, `out = MLP(LN(z')) + z'`.
    fn encoder_layer<'t>(
        &self,
        tape: &'t Tape,
        z: Var<'t>,
        ll: &LayerLeaves<'t>,
        capture: bool,
    ) -> Result<(Var<'t>, Vec<Tensor>)> {
        let _ = tape;
        let normed = z.layernorm_affine(LAYERNORM_EPS, ll.ln1_scale, ll.ln1_bias)?;
        let qkv = normed.linear(ll.qkv_w, ll.qkv_b)?;
        let (attended, captured) = qkv.multi_head_attention(self.config.heads, capture)?;
        let msa = attended.linear(ll.proj_w, ll.proj_b)?;
        let z_mid = msa.add(z)?;

        let normed2 = z_mid.layernorm_affine(LAYERNORM_EPS, ll.ln2_scale, ll.ln2_bias)?;
        let mlp = normed2.linear(ll.fc1_w, ll.fc1_b)?.gelu().linear(ll.fc2_w, ll.fc2_b)?;
        Ok((mlp.add(z_mid)?, captured.unwrap_or_default()))
    }

    /// Pre-training-shaped classification pass: patch tokens plus one [CLS]
    /// token, shared encoder, linear head on the [CLS] output. Detection
    /// mode drops the [CLS] token entirely.
    pub fn forward_classify(&self, image: &Tensor, cls: &ClassifierParams) -> Result<Tensor> {
        let cfg = &self.config;
        let tape = Tape::new();
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let grid = (h / cfg.patch_size, w / cfg.patch_size);
        let patches = patchify(image, cfg.patch_size)?;
        let n_patches = patches.shape()[0];

        let x = tape.constant(patches);
        let pe_w = tape.leaf(self.params.patch_embed.weight.clone());
        let pe_b = tape.leaf(self.params.patch_embed.bias.clone());
        let cls_tok = tape.leaf(cls.cls_token.clone());
        let embedded = x.linear(pe_w, pe_b)?;
        let mut z = tape.concat(&[embedded, cls_tok], 0)?;
        let pe = tape.leaf(cls.pe.values.clone());
        z = z.add(resized_pe(pe, &cls.pe, grid, 1)?)?;

        for l in &self.params.layers {
            let ll = LayerLeaves {
                ln1_scale: tape.leaf(l.ln1_scale.clone()),
                ln1_bias: tape.leaf(l.ln1_bias.clone()),
                qkv_w: tape.leaf(l.qkv.weight.clone()),
                qkv_b: tape.leaf(l.qkv.bias.clone()),
                proj_w: tape.leaf(l.proj.weight.clone()),
                proj_b: tape.leaf(l.proj.bias.clone()),
                ln2_scale: tape.leaf(l.ln2_scale.clone()),
                ln2_bias: tape.leaf(l.ln2_bias.clone()),
                fc1_w: tape.leaf(l.fc1.weight.clone()),
                fc1_b: tape.leaf(l.fc1.bias.clone()),
                fc2_w: tape.leaf(l.fc2.weight.clone()),
                fc2_b: tape.leaf(l.fc2.bias.clone()),
            };
            z = self.encoder_layer(&tape, z, &ll, false)?.0;
        }
        let encoded = z.layernorm(LAYERNORM_EPS)?;
        let cls_row = encoded.slice(0, n_patches, n_patches + 1)?;
        let logits = cls.head.apply(&tape, cls_row)?;
        Ok((*logits.value()).clone())
    }
}

/// Finite-difference verification of the full set-loss gradient.
///
/// Runs the analytic backward pass once, then central differences with
/// `step` on every coordinate of every parameter tensor, holding the
/// matching fixed. Coordinates whose relative error exceeds `tolerance` are
/// re-checked at `step / 10`: piecewise-linear primitives (ReLU, min/max)
/// make the difference quotient meaningless when the perturbation window
/// straddles a kink, while a genuinely wrong gradient stays wrong at every
/// step. Returns the worst surviving relative error.
pub fn check_set_loss_gradients(
    model: &mut Model,
    image: &Tensor,
    gts: &[crate::boxes::GroundTruthObject],
    weights: &crate::loss::LossWeights,
    no_object_weight: f64,
    step: f64,
    tolerance: f64,
) -> Result<f64> {
    use crate::loss::{assign, set_loss};

    let out = model.forward(image, false)?;
    let matching = assign(&out.class_logits, &out.boxes, gts, weights)?;

    let tape = Tape::new();
    let fg = model.forward_graph(&tape, image, false)?;
    let (total, _) = set_loss(fg.class_logits, fg.boxes, gts, &matching, weights, no_object_weight)?;
    let grads = tape.backward(total)?;
    let analytic: Vec<(String, Tensor)> = fg
        .leaves
        .iter()
        .map(|(name, var)| (name.clone(), grads.expect(*var).clone()))
        .collect();
    for (name, g) in &analytic {
        if !g.is_finite() {
            return Err(Error::invalid("grad_check", format!("non-finite gradient in {name}")));
        }
    }

    let loss_of = |model: &Model| -> Result<f64> {
        let tape = Tape::new();
        let fg = model.forward_graph(&tape, image, false)?;
        let (total, _) = set_loss(fg.class_logits, fg.boxes, gts, &matching, weights, no_object_weight)?;
        Ok(total.value().item())
    };

    let numeric_at = |model: &mut Model, name: &str, i: usize, h: f64| -> Result<f64> {
        let set = |model: &mut Model, v: f64| {
            let mut named = model.params.named_mut();
            let t = &mut named.iter_mut().find(|(n, _)| n == name).unwrap().1;
            t.data_mut()[i] = v;
        };
        let orig = {
            let named = model.params.named();
            named.iter().find(|(n, _)| n == name).unwrap().1.data()[i]
        };
        set(model, orig + h);
        let plus = loss_of(model)?;
        set(model, orig - h);
        let minus = loss_of(model)?;
        set(model, orig);
        Ok((plus - minus) / (2.0 * h))
    };

    let mut worst = 0.0f64;
    for (name, g) in &analytic {
        for i in 0..g.numel() {
            let a = g.data()[i];
            let rel = |numeric: f64| (a - numeric).abs() / f64::max(1.0, a.abs());
            let mut err = rel(numeric_at(model, name, i, step)?);
            if err > tolerance {
                err = err.min(rel(numeric_at(model, name, i, step / 10.0)?));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Classification-mode extras: a [CLS] token, its own positional embedding
/// (one extra slot) and a linear classifier.
#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub cls_token: Tensor,
    pub pe: PositionEmbedding,
    pub head: Linear,
}

impl ClassifierParams {
    pub fn init(cfg: &ModelConfig, classes: usize, rng: &mut impl Rng) -> Self {
        ClassifierParams {
            cls_token: Tensor::trunc_normal(&[1, cfg.width], INIT_STD, rng),
            pe: PositionEmbedding::random(cfg.pe_grid, 1, cfg.width, PePlacement::FirstLayerOnly, rng),
            head: Linear::init(cfg.width, classes, rng),
        }
    }
}

/// Resamples a stored PE leaf to the input grid when needed (differentiable).
fn resized_pe<'t>(
    leaf: Var<'t>,
    pe: &PositionEmbedding,
    grid: (usize, usize),
    extra_slots: usize,
) -> Result<Var<'t>> {
    if pe.extra_slots != extra_slots {
        return Err(Error::invalid(
            "position_embedding",
            format!("stored {} extra slots, need {}", pe.extra_slots, extra_slots),
        ));
    }
    if pe.grid == grid {
        Ok(leaf)
    } else {
        leaf.mix_rows(resize_row_weights(pe.grid, grid, pe.extra_slots))
    }
}

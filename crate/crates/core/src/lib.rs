//! Desk-scale, from-scratch vision-transformer object detector.
//!
//! An encoder-only transformer consumes flattened image patches plus a set of
//! learnable detection tokens and emits one (class, box) prediction per
//! token. Label assignment is optimal bipartite matching and the loss is a
//! DETR-style set loss, so the whole pipeline is pure sequence-to-sequence.
//! The crate also carries the FLOPs decomposition and compound-scaling rules
//! for this family of models, a synthetic-shapes dataset with COCO-style AP
//! evaluation, and the detection-token inspection tooling.

pub mod analysis;
pub mod autodiff;
pub mod boxes;
pub mod coco;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod hungarian;
pub mod loss;
pub mod model;
pub mod posembed;
pub mod ppm;
pub mod scaling;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

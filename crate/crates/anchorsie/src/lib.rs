//! Anchor-word structured information extraction.
//!
//! The crate turns annotated documents into anchor-word detection and
//! linking targets, runs a small encoder-decoder transformer with
//! language-conditioned queries over OCR words and a coarse visual grid,
//! decodes its per-token outputs back into grouped entities, pre-trains with
//! masked detection modeling, and scores parses with parsing, labeling and
//! linking F1.
//!
//! Start with the runnable examples (`cargo run --example ...`) or the
//! `anchorsie` binary for the `synth | pretrain | train | eval | parse`
//! workflow.

pub mod autodiff;
pub mod bioes;
pub mod codec;
pub mod data;
pub mod document;
pub mod errors;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pretrain;
pub mod runconfig;
pub mod train;

pub use codec::{AnchorConfig, AnchorMode, AnchorTargets, ClassSet, ParseResult, PrimaryRule};
pub use document::{DocumentAnnotation, Entity, EntityGroup, GroupKind, OcrSequence, OcrWord, OrderMode};
pub use geometry::BBox;
pub use model::Predictions;

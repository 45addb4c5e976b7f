//! Base-detail feature learning for cross-modality (visible/infrared) identity
//! retrieval at desk scale.
//!
//! The library splits a shared-weight backbone into fore/rear halves, extracts
//! modality-specific *detail* embeddings through a stack of invertible affine
//! coupling blocks plus cross-modal attention, derives modality-shared *base*
//! embeddings through a learnable orthogonal projection, and ties the two
//! together with a correlation-ratio distillation loss. Everything runs on a
//! small tape-based reverse-mode autodiff engine over `ndarray`, so every loss
//! term can be checked against central finite differences.
//!
//! Module map:
//! - [`tape`]: reverse-mode autodiff (values, ops, backward, replay).
//! - [`params`]: central parameter store, SGD with momentum, EMA shadow.
//! - [`synthdata`]: synthetic two-modality datasets with known shared/specific
//!   latent structure, PK batch sampling, binary export/import.
//! - [`backbone`]: the fore/rear encoder and the feature pack it produces.
//! - [`losses`]: Pearson correlation, the specific-shared distillation loss,
//!   identity / alignment / batch-hard triplet losses.
//! - [`dfe`]: invertible detail feature extraction and its losses.
//! - [`beg`]: projection-based base embedding generation, fusion, and losses.
//! - [`objective`]: total loss assembly and the training loop.
//! - [`evalproto`]: CMC / mAP retrieval evaluation with camera filtering.
//! - [`oracle`]: independent verification machinery (finite differences,
//!   brute-force average precision, coupling round-trips).
//! - [`config`], [`checkpoint`], [`plot`]: experiment configuration, artifact
//!   container, figure emission for the CLI.

pub mod backbone;
pub mod nn;
pub mod beg;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dfe;
pub mod evalproto;
pub mod losses;
pub mod objective;
pub mod oracle;
pub mod params;
pub mod plot;
pub mod synthdata;
pub mod tape;

// pub use backbone::{Backbone, BackboneConfig, FeaturePack};
// pub use beg::{BaseFusion, BegModule, ProjectionHead};
// pub use config::{AblationToggles, ExperimentConfig};
// pub use dfe::{DetailCrossAttention, DetailHead, DfeModule, InnBlock};
// pub use evalproto::{cmc_map, make_protocol_split, EvalReport};
// pub use losses::{LossBreakdown, SkdConfig};
// pub use objective::{Model, TrainConfig};
// pub use params::{ParamId, Params};
// pub use synthdata::{ModalBatch, SynthDataset, SynthSpec};
// pub use tape::{Graph, NodeId, Tape};

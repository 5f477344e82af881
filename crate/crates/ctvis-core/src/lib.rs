//! Online instance-association engine with consistent contrastive training.
//!
//! The crate is organized around the lifecycle of an instance-tracking run:
//!
//! - [`embedding`] — dense vector primitives (cosine similarity, stable softmax).
//! - [`mask`] — binary raster masks with run-length encoding.
//! - [`memory`] — per-track embedding histories and momentum-averaged (MA)
//!   embeddings maintained by similarity-guided fusion, plus the noise-injected
//!   training-time update.
//! - [`association`] — inference-time matching of detections to memory tracks
//!   via bi-softmax similarity, new-track initiation, video-level scoring.
//! - [`assignment`] — Hungarian matching for training-time ground-truth
//!   assignment.
//! - [`contrastive`] — contrastive-item construction against the memory bank
//!   and the embedding loss with analytic gradients.
//! - [`trainer`] — trains a linear embedding head on synthetic observation
//!   streams, with consistent training and a single-reference baseline.
//! - [`pseudo_video`] — pseudo-video generation from single labeled scenes
//!   (rotation, crop-zoom, crop-shift, copy&paste) and the observation bridge
//!   into the tracking pipeline.
//! - [`metrics`] — tube IoU, track-level AP/AR, ID switches, association
//!   accuracy, embedding-discriminability margins.
//! - [`harness`] — seeded benchmark and ablation-grid machinery.
//! - [`run`] — run-directory persistence (configs, manifests, artifacts).

pub mod assignment;
pub mod association;
pub mod contrastive;
pub mod embedding;
pub mod harness;
pub mod mask;
pub mod matrix;
pub mod memory;
pub mod metrics;
pub mod pseudo_video;
pub mod run;
pub mod trainer;

pub use embedding::Embedding;
pub use mask::BinaryMask;
pub use memory::{MemoryBank, TrackId};

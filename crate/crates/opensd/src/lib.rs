//! Desk-scale open-vocabulary segmentation and detection.
//!
//! A framework-free pipeline built around a query-based decoder that is
//! decoupled into thing and stuff branches, Hungarian-matched set prediction,
//! and dual classifiers (query-embedding based for in-vocabulary categories,
//! mask-pooled visual embeddings for out-of-vocabulary ones) with learnable
//! decoupled prompt vectors. Outputs are assembled into four tasks — panoptic,
//! semantic, instance segmentation and detection — and scored with PQ, mIoU
//! and mAP.
//!
//! Everything runs on a small tape-based `f64` tensor core; no GPU, no
//! external ML framework. Synthetic scenes with planted per-category color
//! signatures stand in for real imagery and for a pretrained vision/text
//! encoder pair, which makes open-vocabulary behavior testable end to end.
//!
//! Training is sequential and bit-reproducible under a fixed seed. Evaluation
//! and inference fan out across images with rayon when the `parallel` feature
//! (default) is enabled; the reduction order is fixed, so results are
//! identical to the sequential build.

pub mod attention;
pub mod classifiers;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod inference;
pub mod matching;
pub mod metrics;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

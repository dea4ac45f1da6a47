//! Single-pass ensemble uncertainty estimation for query-based set-prediction
//! detectors, together with a probabilistic-detection evaluation stack.
//!
//! The pipeline runs a miniature transformer decoder over several isolated
//! query groups in one forward pass (inter-group self-attention is masked
//! out), clusters the pooled per-group detections, and aggregates each
//! cluster into a single detection with a scaled confidence and a 4×4
//! spatial covariance. Evaluation covers COCO-style mAP, detection expected
//! calibration error (D-ECE), and probabilistic detection quality (PDQ).
//! A seeded synthetic scene/ensemble generator stands in for trained models.

pub mod aggregation;
pub mod cli;
pub mod clustering;
pub mod decoder;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod synth;

pub use error::{Error, Result};

//! Zero-shot temporal action detection on a synthetic benchmark.
//!
//! The pipeline couples a deformable-attention localizer over motion-aware
//! snippet features with a vision-language classification branch built from
//! frozen mock encoders over a shared concept space. Lightweight adapters
//! finetune the text side; training uses bipartite matching with a
//! three-term loss; inference applies Soft-NMS and is scored with mAP over
//! zero-shot class splits.

pub mod adapters;
pub mod autodiff;
pub mod checkpoint;
pub mod concepts;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod gradcheck;
pub mod localizer;
pub mod matrix;
pub mod optim;
pub mod params;
pub mod plot;
pub mod postprocess;
pub mod rng;
pub mod segments;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;

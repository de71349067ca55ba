//! Two-stage temporal event detector over three-channel radar spectrograms:
//! conv backbone with a feature pyramid, anchor-based segment proposals,
//! 1D RoIAlign and a classification/refinement head.

pub mod anchors;
pub mod error;
pub mod infer;
pub mod io;
pub mod layers;
pub mod model;
pub mod nms;
pub mod params;
pub mod train;

pub use error::{DetectorError, Result};
pub use infer::{DetectOptions, Model};
pub use model::ArchConfig;
pub use train::{train, TrainConfig, TrainingSample};

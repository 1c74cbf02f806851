//! A modality-agnostic vision model at desk scale.
//!
//! Images, videos and single-view RGBD inputs are laid out as `T×H×W×C`
//! tensors, cut into spatio-temporal patches, embedded by a shared RGB
//! embedder (plus an additive depth embedder for RGBD), and processed by one
//! windowed-attention trunk. Each training dataset owns a linear head; a
//! sample's loss only flows through its own dataset's head.

pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod heads;
pub mod model;
pub mod nn;
pub mod optim;
pub mod retrieval;
pub mod patch_embed;
pub mod rng;
pub mod sample;
pub mod train;
pub mod trunk;
pub mod window;

pub use error::{Error, Result};
pub use model::{ModelConfig, Omnivore};
pub use sample::{DatasetId, Modality, VisualSample};

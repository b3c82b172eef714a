//! Colour reconstruction for luminance-only imagery.
//!
//! The crate implements the full pipeline: CIELab colour math and gamut
//! discretisation, the convolutional/capsule encoder-decoder, the three
//! training phases (classifier finetune, progressive end-to-end growth,
//! adversarial refinement), quality metrics, and the surrounding plumbing
//! (datasets, checkpoints, configuration).

pub mod blocks;
pub mod capsules;
pub mod colorspace;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod network;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use colorspace::{GamutGrid, LabImage, RgbImage, SoftEncoding};
pub use network::{AblationFlags, ModelState, NetworkConfig, NetworkPlan, ScalePreset};
pub use tensor::Tensor;

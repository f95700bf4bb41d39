//! Pixelwise scene labeling built from four cooperating pieces: a multiscale
//! convolutional feature extractor over a locally normalized Laplacian
//! pyramid, a minimum-spanning-tree segmentation hierarchy, fixed-size
//! max-pooled segment descriptors, and an entropy-minimal cover of the
//! hierarchy that assigns every pixel the class of its least-impure
//! enclosing segment.
//!
//! Training happens in two stages: the convnet is first fit with a
//! per-pixel linear classifier on sampled locations, then frozen while a
//! small two-layer classifier learns to predict per-segment class
//! histograms. The `scene-parse` binary wires the stages together; see the
//! crate README for the full workflow.

pub mod cover;
pub mod dataset;
pub mod descriptor;
pub mod error;
pub mod jitter;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod msnet;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod pyramid;
pub mod seghier;
pub mod selftest;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use volume::FeatureVolume;

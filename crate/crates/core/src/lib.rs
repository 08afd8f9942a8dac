//! Differentiable Gaussian splatting with learnable per-Gaussian identity
//! encodings for 3D instance segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`scene`] / [`format`]: the Gaussian cloud, group editing and the GSEG1 container.
//! - [`camera`]: pinhole / orthographic cameras and EWA projection to screen space.
//! - [`render`] / [`backward`]: tiled forward compositing and its hand-derived reverse pass.
//! - [`head`]: the linear identity classifier and the pixel cross-entropy loss.
//! - [`igd`]: identity-gradient guided densification.
//! - [`knn`]: global and direction-restricted neighbour search plus the 3D KL consistency loss.
//! - [`optim`], [`densify`], [`trainer`]: Adam, standard densification and the training loop.
//! - [`synth`], [`dataset`], [`metrics`]: synthetic scenes, dataset I/O and evaluation.

pub mod backward;
pub mod camera;
pub mod config;
pub mod dataset;
pub mod densify;
pub mod error;
pub mod format;
pub mod head;
pub mod igd;
pub mod image;
pub mod knn;
pub mod metrics;
pub mod optim;
pub mod render;
pub mod scene;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

//! Two-stage volumetric organ segmentation.
//!
//! A global network produces a coarse probability map, a statistical shape
//! model is fitted to it by particle swarm optimization to recover the organ's
//! bounding box, and a local network segments a volume of interest resampled so
//! the organ has a fixed voxel footprint. Training is augmented by deforming
//! images along displacements derived from the same shape model.
//!
//! Modules, bottom-up:
//! - [`volume`]: grids, resampling, cropping, normalization, distance maps, morphology
//! - [`autodiff`]: reverse-mode tensors for the network's operations
//! - [`network`]: the contracting/expanding architecture
//! - [`shapemodel`]: PCA over signed-distance maps
//! - [`locate`]: PSO shape fitting and local-grid resampling
//! - [`augment`]: shape-guided deformation, shifts and noise
//! - [`train`]: Adam, Dice objective, plateau schedule, cross-validation
//! - [`app`]: pipeline, metrics, phantoms, file formats, CLI

pub mod app;
pub mod augment;
pub mod autodiff;
pub mod error;
pub mod locate;
pub mod network;
pub mod shapemodel;
pub mod train;
pub mod volume;

pub use error::{Error, Result};

//! Pipeline orchestration, metrics, phantoms, file formats and the CLI.

pub mod cli;
pub mod config;
pub mod metaimage;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod training;

pub use config::ConfigFile;
pub use metaimage::{read_mask, read_volume, write_mask, write_volume, ElementType};
pub use metrics::{dice_hard, evaluate_masks, extent_errors, EvalResult, ExtentErrors};
pub use phantom::{make_phantom, make_phantoms};
pub use pipeline::{segment, segment_detailed, PipelineBundle, PipelineConfig, Segmentation};
pub use training::{Stage, StageSettings};

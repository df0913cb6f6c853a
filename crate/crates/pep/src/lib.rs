//! Point-based instance segmentation: perceive candidate instances, excavate
//! the ones overlooked by per-pixel classification, purify duplicates through
//! pairwise affinities, and render a mask per surviving descriptor.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod instance_purifying;
pub mod mask_learning;
pub mod object_excavating;
pub mod params;
pub mod semantics_perceiving;
pub mod supervision;
pub mod training;
pub mod viz;

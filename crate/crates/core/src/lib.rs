//! Quantitative assessment of generated (super-resolved) confocal stacks of
//! tubular porosity networks against ground-truth stacks.
//!
//! The crate covers the full chain: stack I/O and resampling, rigid
//! registration, patch mosaics, Hessian vesselness, hysteresis
//! binarization, 2D connected-component matching, 3D skeleton graphs,
//! full-reference image quality metrics, rank statistics, and a synthetic
//! phantom generator that serves as ground truth for all of the above.

pub mod cc;
pub mod error;
pub mod iqa;
pub mod mosaic;
pub mod phantom;
pub mod pipeline;
pub mod register;
pub mod segment;
pub mod skelgraph;
pub mod stats;
pub mod vesselness;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{BinaryVolume, Dtype, Image2D, ImageStack, StackHeader};

//! Multiframe scene flow estimation from RGB-D sequences.
//!
//! The reference depth frame is oversegmented into approximately rigid
//! patches; every segment receives a 6-DOF pose per frame pair and all poses
//! are optimized jointly in a lifted, robustified nonlinear least-squares
//! energy combining brightness constancy, point-to-plane projective ICP,
//! a lifted segment-coherence regularizer and a pose concatenation term.
//! The normal equations are solved matrix-free with conjugate gradient
//! inside a Levenberg-Marquardt loop that allows non-monotonic steps.
//!
//! Entry points:
//! - [`pipeline::run_window`] drives the full estimation for one temporal
//!   window and returns a [`pipeline::FlowField`].
//! - [`synth::standard_scenes`] generates deterministic synthetic scenes
//!   with exact ground-truth flow for testing and benchmarking.
//! - [`io`] reads RGB-D sequences and reads/writes flow files.

pub mod config;
pub mod energy;
pub mod error;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod raster;
pub mod segmentation;
pub mod solver;
pub mod synth;

pub use error::Error;

//! Self-contained inference engine, architecture builder and
//! FLOP/parameter analyzer for the LeYOLO object-detection family.
//!
//! The crate is organized around plain data and pure functions:
//!
//! * [`tensor`] — deterministic NCHW kernels (convolution, SiLU, batch norm,
//!   upsampling, concatenation, residual addition)
//! * [`blocks`] — the inverted bottleneck and conv-BN-SiLU composites
//! * [`arch`] — declarative architecture graphs, variant scaling, ablations
//! * [`engine`] — weight binding and topological forward execution
//! * [`analyzer`] — parameter/MACC/FLOP accounting and constraint checks
//! * [`postprocess`] — letterboxing, anchor-free decoding, NMS
//! * [`io`] — the LEYW weight container, PPM reading, random initialization

pub mod analyzer;
pub mod arch;
pub mod blocks;
pub mod engine;
pub mod error;
pub mod io;
pub mod postprocess;
pub mod tensor;

pub use error::{Error, Result};

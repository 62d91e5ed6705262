//! Knowledge distillation for compressed-sensing MRI reconstruction.
//!
//! The crate is organised around the reconstruction pipeline:
//!
//! - [`kspace`]: centered orthonormal 2-D FFT, Cartesian masks, retrospective
//!   undersampling and the data-consistency blend.
//! - [`models`]: cascaded reconstruction networks (DC-CNN) and VDSR, with a
//!   hand-written reverse pass and feature taps for distillation.
//! - [`distill`]: attention transfer, imitation loss and the FN/FSP/SP/AH
//!   baselines.
//! - [`training`]: the three-step teacher/student procedure, Adam and
//!   checkpoints.
//! - [`data`]: synthetic phantoms, the slice file format and pair builders.
//! - [`eval`]: PSNR, SSIM, Wilcoxon signed-rank, residue studies and
//!   runtime benchmarks.

pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod kspace;
pub mod models;
pub mod nn;
pub mod real;
pub mod table;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;

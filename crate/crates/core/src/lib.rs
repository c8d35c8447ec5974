//! Metasurface convolution encoders: a wave-optics model of a pillar
//! metasurface, gradient design of polychromatic PSFs that realize the first
//! convolution of a small CNN, a simulated camera capture, and the digital
//! side (distillation, calibration, transfer).
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`).

pub mod adapt;
pub mod analytics;
pub mod distill;
pub mod error;
pub mod fft;
pub mod io;
pub mod kernel_bank;
pub mod nn;
pub mod optics;
pub mod optim;
pub mod pipeline;
pub mod psf_design;
pub mod scalar;
pub mod scatterer;
pub mod sensor;

pub use error::{Error, Result};
pub use scalar::Real;

/// Single-precision student, as used for training.
pub type Student32 = nn::student::StudentNetwork<f32>;
/// Double-precision student, as used for oracle comparisons.
pub type Student64 = nn::student::StudentNetwork<f64>;
pub type Teacher32 = nn::teacher::TeacherNetwork<f32>;
pub type WidthMap64 = psf_design::WidthMap<f64>;
pub type PsfSimulator64 = psf_design::PsfSimulator<f64>;
pub type KernelSet64 = kernel_bank::SignedKernelSet<f64>;
pub type PsfBank64 = sensor::PsfBank<f64>;
pub type Encoder64 = sensor::Encoder<f64>;
pub type Calibration64 = adapt::CalibrationLayer<f64>;
pub type TransferHead64 = adapt::TransferHead<f64>;

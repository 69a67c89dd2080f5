//! Dual-path magnitude speech restoration toolkit.
//!
//! The crate is organized around five subsystems:
//!
//! - [`signal`]: STFT analysis/synthesis, magnitude compression, phase
//!   handling, and WAV I/O at 16 kHz.
//! - [`sim`]: distortion simulation — room impulse responses, SNR mixing,
//!   low-pass filtering — plus corpus generation and verification.
//! - [`model`]: the dual-path magnitude network family (S1, S2, U1, DM1,
//!   DM2) built on a small reverse-mode [`autograd`] engine.
//! - [`train`]: loss stack, AdamW optimization loop, and checkpointing.
//! - [`metrics`]: LSD, STOI, SI-SDR, measured SNR, RT60 estimation, and
//!   report aggregation.

pub mod autograd;
pub mod filter;
pub mod metrics;
pub mod model;
pub mod signal;
pub mod sim;
pub mod train;
pub mod wav;

/// Sample rate every pipeline stage assumes.
pub const SAMPLE_RATE: u32 = 16_000;

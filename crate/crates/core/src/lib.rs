//! Software twin of a dual-wavelength (660/940 nm) pulse oximeter.
//!
//! The crate covers the whole acquisition and evaluation chain without
//! hardware: a Beer-Lambert forward model ([`optics`]), a deterministic
//! PPG generator with supply, ambient and motion artifacts ([`synth`]),
//! ratio-of-ratios SpO₂ and peak-based heart-rate estimation
//! ([`estimator`]), an I2C symbol codec with a register-mapped sensor
//! ([`codec`]), a line-oriented serial telemetry link ([`wire`]) and the
//! accuracy benchmark ([`bench`]).

pub mod bench;
pub mod codec;
pub mod config;
pub mod estimator;
pub mod filter;
pub mod optics;
pub mod synth;
pub mod wire;

pub use estimator::{process_stream, EstimatorConfig, Reading, ReadingFlags};
pub use optics::{CalibrationCurve, ExtinctionTable};
pub use synth::{synthesize, ArtifactSchedule, DualSample, PhysioProfile, SampleStream};

//! Desk-scale conditional-diffusion augmentation toolkit.
//!
//! The crate covers the full loop used to stress-test mask-conditioned
//! synthesis: procedural lesion-style masks ([`maskgen`]), a DDIM diffusion
//! engine with a locked-backbone conditioning adapter ([`diffusion`],
//! [`control`]), image metrics ([`metrics`]), a small segmentation harness
//! ([`segharness`]), and an end-to-end experiment driver ([`pipeline`]).
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar for common use. Every randomized operation takes an
//! explicit seed and produces results independent of thread count.

pub mod control;
pub mod datacore;
pub mod diffusion;
pub mod error;
pub mod maskgen;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod scalar;
pub mod schedule;
pub mod seeding;
pub mod segharness;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

pub type GridF32 = datacore::Grid<f32>;
pub type GridF64 = datacore::Grid<f64>;
pub type ImageGridF32 = datacore::ImageGrid<f32>;
pub type ImageGridF64 = datacore::ImageGrid<f64>;
pub type NoiseScheduleF32 = schedule::NoiseSchedule<f32>;
pub type NoiseScheduleF64 = schedule::NoiseSchedule<f64>;

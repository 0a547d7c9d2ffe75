//! Multi-conditional super-resolution of metabolic maps.
//!
//! One network upsamples low-resolution metabolite maps for any input
//! resolution, metabolite and adversarial weight. The crate covers synthetic
//! phantom data, the conditioned network, losses and metrics, training,
//! evaluation and an HTTP inference service.

pub mod data;
pub mod error;
pub mod eval;
pub mod metabolite;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod service;
pub mod train;

pub use error::{Error, Result};
pub use metabolite::Metabolite;

/// A real-valued 2D image.
pub type Field = ndarray::Array2<f64>;

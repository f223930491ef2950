//! Data-centric tensor-kernel compiler for simulated near-bank PIM backends.

pub mod backend;
pub mod demo;
pub mod driver;
pub mod error;
pub mod ir;
pub mod plan;
pub mod predictor;
pub mod prune;
pub mod schedule;
pub mod sim;
pub mod tensor;
pub mod tile;

pub use backend::{load_backend, resolve_backend, BackendDescriptor, BackendPreset, GroupUnit};
pub use error::{Error, Result};

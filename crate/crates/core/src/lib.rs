//! Layer-routed spectral knowledge distillation from a multi-layer
//! teacher into a compact mimic-then-compress student.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod probe;
pub mod router;
pub mod spectral;
pub mod student;
pub mod synth;
pub mod teacher;
pub mod training;

pub use error::{DlinkError, Result};

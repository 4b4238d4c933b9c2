//! Few-shot action recognition with prompt-token fusion, two temporal
//! context views and gated mutual distillation between them.

pub mod autograd;
pub mod encoders;
pub mod episodes;
pub mod harness;
pub mod error;
pub mod config;
pub mod matching;
pub mod mmfe;
pub mod model;
pub mod mvmd;
pub mod params;
pub mod pps;
pub mod seed;
pub mod temporal_views;
pub mod tensor;

pub use error::{Error, Result};

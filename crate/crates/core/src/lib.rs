#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camlab;
pub mod config;
pub mod corrector;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod gat;
pub mod graphbuild;
pub mod superpixel;
pub mod synth;
pub mod tensorio;

pub use config::PipelineConfig;
pub use error::{Error, Result};

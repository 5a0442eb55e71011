//! Joint CTC / RNN-T sequence transduction for end-to-end spoken language
//! understanding.

pub mod autodiff;
mod error;

pub use error::{Error, Result};
pub mod ctc;
pub mod lattice;
pub mod rnnt;
pub mod datasynth;
mod nn;
pub mod encoder;
pub mod kt;
pub mod sluhead;
pub mod metrics;
pub mod config;
pub mod model;
pub mod pipeline;
pub mod verify;

//! Open-vocabulary camouflaged object segmentation at desk scale.

pub mod cascade;
pub mod cli;
pub mod dataforge;
pub mod dualenc;
pub mod error;
pub mod metrics;
pub mod nncore;
pub mod segmentor;

pub use error::{Error, Result};

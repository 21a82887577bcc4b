//! Probabilistic degradation generators and collaborative training of
//! super-resolution models on their pseudo-pairs.

pub mod collab;
pub mod config;
pub mod data;
pub mod degrader;
pub mod error;
pub mod generator;
pub mod image;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod resample;
pub mod robustness;
pub mod rng;
pub mod sr;
pub mod synth;
pub mod unpaired;

pub use error::{Error, Result};
pub use image::ImageBatch;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/generators.md")]
    mod generators {}
    #[doc = include_str!("../../../book/src/unpaired.md")]
    mod unpaired {}
    #[doc = include_str!("../../../book/src/collab.md")]
    mod collab {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

//! Federated learning on multimodal graphs with missing modalities.
//!
//! Clients encode the modalities they observe, regenerate absent ones from
//! graph context, route and fuse cells by predicted uncertainty with a
//! structural fallback, and a server aggregates their parameters with
//! reliability-aware weights. See the guide in `book/` for a walkthrough.

pub mod config;
pub mod encoding;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod fusion;
pub mod generation;
pub mod graphdata;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod tasks;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/data.md")]
mod book_data {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/generation.md")]
mod book_generation {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/fusion.md")]
mod book_fusion {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/aggregation.md")]
mod book_aggregation {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/experiments.md")]
mod book_experiments {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/verification.md")]
mod book_verification {}

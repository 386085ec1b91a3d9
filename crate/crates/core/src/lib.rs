//! Coarse-to-fine localization of natural-language position descriptions
//! against object-level city maps.
//!
//! The coarse stage embeds text queries and map submaps into a shared space
//! (instance-level edge graphs with Bézier modulation and Gaussian
//! aggregation, a frequency-domain global encoder) and retrieves submaps by
//! nearest neighbour. The fine stage regresses a 2D position inside a
//! retrieved submap together with a precision that weights its own loss.
//!
//! Everything runs on [`diffcore`], a small f64 reverse-mode engine, over
//! synthetic cities from [`scenegen`].

pub mod diffcore;
mod error;
pub mod finestage;
pub mod frontends;
pub mod globalalign;
pub mod harness;
pub mod instalign;
pub mod retrieval;
pub mod scenegen;

pub use error::{Error, Result};

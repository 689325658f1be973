//! Differentially private image synthesis at desk scale: data handling,
//! noise mechanisms, a Rényi accountant, kernel embeddings, a small MLP
//! library, five synthesizers, fidelity and utility evaluation, an
//! experiment pipeline and statistical audits.

pub mod accountant;
pub mod audits;
pub mod dataio;
pub mod embeddings;
pub mod error;
pub mod fidelity;
#[doc(hidden)]
pub mod fuzz_entry;
pub mod mechanisms;
pub mod pipeline;
pub mod rng;
mod serde_float;
pub mod synthesizers;
pub mod tinynn;
pub mod utility;

pub use error::{Error, Result};

//! Query-based cooperative 3D detection between a vehicle and a roadside
//! unit: geometry, a small dense-network toolkit, object queries and their
//! wire format, cross-agent query interaction, a synthetic scene simulator,
//! the end-to-end pipeline and BEV detection metrics.

pub mod channel;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod geometry;
pub mod interaction;
pub mod nn;
pub mod pipeline;
pub mod query;
pub mod scenario;

pub use error::{Error, Result};

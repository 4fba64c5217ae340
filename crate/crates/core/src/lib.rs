//! Feature selection for diffusion U-Nets: an activation catalog, qualitative
//! filtering, per-activation probing, recipe assembly and task evaluation.

pub mod assembly;
pub mod catalog;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod extraction;
pub mod filtering;
pub mod optim;
pub mod probing;
pub mod resize;
pub mod textfmt;
pub mod toybackbone;
pub mod visualize;

pub use error::{Error, Result};

//! Training, evaluation and accounting on top of the model pieces.

pub mod account;
pub mod adam;
pub mod data;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod plan;
pub mod train;

pub use adam::AdamState;
pub use data::*;
pub use eval::*;
pub use model::*;
pub use plan::*;
pub use train::*;

pub mod analysis;
pub mod atomistic;
pub mod continuum;
pub mod coupling;
pub mod error;
pub mod geometry;
pub mod potential;
pub mod sparse;
pub mod study;

pub use error::{AtcError, Result};

pub mod clipgen;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod tall;
pub mod trainer;

pub use error::{Result, TallError};

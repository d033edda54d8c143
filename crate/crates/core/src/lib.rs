//! Face attribute editing with an attention-branch discriminator and
//! complementary attention features.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod training;

pub use error::{Error, Result};

//! Joint person search (detection plus re-identification) with two
//! teacher-student distillation schemes: detector distillation and
//! frozen identity lookup-table distillation.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod boxes;
mod codec;
pub mod rng;
pub mod synthscene;
pub mod params;
pub mod psmodel;
pub mod oim;
pub mod kd;
pub mod eval;
pub mod harness;

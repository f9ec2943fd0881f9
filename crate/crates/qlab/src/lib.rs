//! Numerical laboratory for random expanding dynamics: transfer-operator
//! cocycles, random Gibbs triplets, cone contraction, block schedules and
//! quenched limit theorems at desk scale.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod environment;
pub mod error;
pub mod geometry;
pub mod par;
pub mod stats;
pub mod systems;
pub mod transfer;
pub mod rpf;
pub mod cones;
pub mod blocks;
pub mod limits;

pub use error::{Error, Result};

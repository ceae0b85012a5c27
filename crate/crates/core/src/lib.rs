// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod factor;
mod linalg;
pub mod mcd;
mod par;
pub mod regression;
pub mod rng;
pub mod robust;
pub mod screening;
pub mod selection;
pub mod simulation;

pub use error::{Error, Result};
pub use nalgebra;

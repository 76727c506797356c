//! Deterministic reverse-mode differentiation over dense `f64` grids.
//!
//! A [`Tape`] records every primitive as it executes; [`Tape::backward`]
//! walks it in strict reverse order and adds parameter gradients into a
//! [`ParamStore`]. [`finite_difference_check`] verifies any scalar
//! computation built on the tape against central differences.

mod array;
pub mod checkpoint;
mod gemm;
mod gradcheck;
mod layers;
mod ops;
mod params;
mod tape;

pub use array::{Array, Mask};
pub use gradcheck::{finite_difference_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use layers::{zero_params, ConvLayer, ConvRank, LinearLayer, Mlp};
pub use ops::{sigmoid, Reduce, Taps};
pub use params::{derive_seed, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Primitive, Tape, Var};

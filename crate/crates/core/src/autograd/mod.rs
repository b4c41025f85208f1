//! Reverse-mode differentiation over a define-by-run tape.

pub mod kernels;
mod tape;

pub use kernels::ConvGeom;
pub use tape::{BnMode, Gradients, RunningStats, Tape, Var, BN_EPS, BN_MOMENTUM};

//! Numerical laboratory for the full-loop Stern-Gerlach interferometer:
//! spin-dependent Gaussian wavepacket propagation under pulsed magnetic
//! gradients, interference contrast, timing optimization, fringe fitting and a
//! macroscopic-object feasibility calculator.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod constants;
pub mod error;
pub mod feasibility;
pub mod interferometer;
pub mod magnetics;
pub mod optimizer;
pub mod quadrature;
pub mod spinsys;
pub mod wavepacket;

pub use error::{Result, SgiError};

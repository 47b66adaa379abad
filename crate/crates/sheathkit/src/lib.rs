//! Kinetic plasma-sheath toolkit for the 1D Vlasov–Poisson system on (0, 1).

// `!(x > 0.0)` is used on purpose: it rejects NaN together with x ≤ 0.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod characteristics;
pub mod cli;
pub mod elliptic;
pub mod equilibrium;
pub mod error;
pub mod evolution;
pub mod interp;
pub mod linalg;
pub mod profiles;
pub mod quadrature;
pub mod roots;
pub mod stability;

pub use error::{Error, Result};

//! Density-constrained mean-field game solver.
//!
//! The population density is carried by a discrete-time normalizing flow
//! ([`flow`]), value networks solve the McKean–Vlasov FBSDE ([`fbsde`]), and
//! a spectral neural operator ([`operator`]) maps encoded boundary conditions
//! to density values at every time step. A finite-difference fixed-point
//! solver ([`oracle`]) provides independent ground truth.

pub mod error;
pub mod exec;
pub mod fbsde;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod mfg;
pub mod nn;
pub mod operator;
pub mod oracle;
pub mod scenarios;

pub use error::{Error, Result};
pub use exec::Exec;

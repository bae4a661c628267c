//! Optimal per-risk reinsurance for a portfolio of dependent risks.
//!
//! An insurer holding risks X_1..X_n buys, for each risk, a treaty that cedes
//! Z_i(X_i) of the claim to a reinsurer in exchange for a premium set by a
//! moment-based principle. The library computes the treaties maximizing the
//! expected concave utility of the insurer's net profit
//!
//! ```text
//! L = c - sum_i ( P_i + X_i - Z_i(X_i) ),   P_i = Psi_i(E Z_i, ..., E Z_i^k)
//! ```
//!
//! by a cyclic per-risk fixed-point scheme: each risk's first-order optimality
//! condition is inverted pointwise into a ceded curve via a moment map whose
//! fixed point is found by a damped Newton iteration, with an interior barrier
//! annealed toward zero to keep the curve differentiable in the moments.
//!
//! Modules follow the pipeline: [`dist`] (claim marginals), [`copula`]
//! (dependence), [`market`] (premium principles and utilities), [`treaty`]
//! (ceded curves, strategies, the market model), [`quad`] (quadrature and
//! conditional expectations), [`solver`] (the optimizer), [`verify`]
//! (optimality residuals, diagnostic probes, a brute-force oracle), and
//! [`runner`]/[`config`] (the `retrocede` CLI's engine).

pub mod config;
pub mod copula;
pub mod dist;
pub mod error;
pub mod market;
pub mod plot;
pub mod quad;
pub mod runner;
pub mod solver;
pub mod treaty;
pub mod verify;

pub use error::{Error, Result};

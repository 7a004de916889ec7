//! Analysis and Monte-Carlo simulation of stochastic Lotka-Volterra food
//! chains
//!
//! ```text
//! dX_i = X_i F_i(X) dt + σ_i X_i dB_i,
//! F_1 = a10 - a11 x1 - a12 x2,
//! F_i = -a_i0 + a_{i,i-1} x_{i-1} - a_ii x_i - a_{i,i+1} x_{i+1}.
//! ```
//!
//! The crate decides persistence or extinction from the coefficients
//! ([`persistence`]), certifies the Lyapunov drift inequalities
//! ([`lyapunov`]) and the bracket-generating condition ([`hormander`]),
//! simulates the process in log coordinates ([`sim`]) and diagnoses the
//! convergence regime from ensembles ([`convergence`]).

// Negated comparisons are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convergence;
pub mod hormander;
pub mod lyapunov;
pub mod model;
pub mod ode;
pub mod persistence;
pub mod poly;
pub mod rng;
pub mod sim;
pub mod stats;

/// Arbitrary-precision rational used by the exact-arithmetic paths.
pub type Rational = num_rational::BigRational;

pub use model::{ChainSpec, Coefficients, State, TildeSpec};
pub use persistence::{classify, Regime, RegimeReport};

pub use sim::{ensemble, simulate, EnsembleRequest, EnsembleSummary, SimConfig, Trajectory};

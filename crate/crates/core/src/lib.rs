//! Asymptotic approximation of Merton utility maximization under one fast and
//! one slow stochastic factor.
//!
//! The market model is
//!
//! ```text
//! dS = mu(Y,Z) S dt + sigma(Y,Z) S dW
//! dY = (1/eps) b(Y) dt + (1/sqrt(eps)) a(Y) dW^Y      (fast factor)
//! dZ = delta c(Z) dt + sqrt(delta) g(Z) dW^Z          (slow factor)
//! ```
//!
//! with correlated Brownian motions. The library computes the first-order
//! value approximation `v0 + sqrt(eps) v10 + sqrt(delta) v01`, the corrector
//! terms needed to build sub- and super-solutions that sandwich the true
//! value function to `O(eps + delta)`, and provides independent oracles
//! (a distortion-transform PDE for power utility and Monte Carlo under the
//! zeroth-order strategy) to verify the accuracy claim numerically.
//!
//! Crate layout mirrors the pipeline:
//!
//! * [`model`] — factor-model catalog and validation
//! * [`utility`] — utility families and their regularity probes
//! * [`averaging`] — invariant density, ergodic averages, Poisson solver,
//!   and the full theta coefficient family
//! * [`jets`] — truncated derivative-table calculus used everywhere
//! * [`merton`] — classical Merton fields (closed forms and H-transform)
//! * [`expansion`] — first-order correction terms and the zeroth strategy
//! * [`subsuper`] — sub/super-solution assembly, calibration, verification
//! * [`montecarlo`] — SDE simulation of the factors and wealth
//! * [`oracle`] — distortion-transform value PDE and HJB residual probe
//! * [`harness`] — epsilon/delta sweeps, slope fits, report emission

pub mod averaging;
pub mod error;
pub mod expansion;
pub mod harness;
pub mod jets;
pub mod merton;
pub mod model;
pub mod montecarlo;
pub mod oracle;
pub mod subsuper;
pub mod utility;

pub use error::CoreError;
pub use model::{CorrelationTriple, ModelConfig, ModelSpec};
pub use utility::{UtilityConfig, UtilitySpec};

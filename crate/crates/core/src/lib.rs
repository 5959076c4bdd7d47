//! Online learning of unknown user demands inside a max-min fair allocator.
//!
//! The crate is organised bottom-up:
//!
//! * [`mmf`] is the single-round weighted max-min fair allocator.
//! * [`env`] holds the ground truth: payoff curves, utilities, load and reward
//!   generation, and the reporting policies agents may follow.
//! * [`learners`] contains the per-agent demand estimators (grid search,
//!   binary search, the generalized-linear estimator and the dyadic tree).
//! * [`mechanism`] wires learners, environment and allocator into the
//!   bracketed strategy-proof loop, the round-by-round loop and the
//!   entitlement baseline.
//! * [`metrics`] turns traces into loss, fairness, strategy and coverage numbers.
//! * [`config`] and [`experiment`] drive seeded multi-run experiments and CSV output.
//! * [`par`] runs independent simulations on rayon when the `parallel`
//!   feature is enabled, sequentially otherwise.

pub mod config;
pub mod env;
pub mod error;
pub mod experiment;
pub mod learners;
pub mod mechanism;
pub mod metrics;
pub mod mmf;
pub mod par;

pub use error::{Error, FieldError, Result};

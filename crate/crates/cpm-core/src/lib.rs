//! Causal proxy models at desk scale.
//!
//! This crate trains small proxy classifiers that mimic the factual and
//! counterfactual behaviour of a frozen black-box classifier over a fully
//! synthetic structural causal model (SCM), then benchmarks how well each
//! explanation method recovers the black box's individual causal concept
//! effects (ICaCE).
//!
//! The pieces fit together like this:
//!
//! * [`autodiff`] — a tape-based reverse-mode differentiation engine with the
//!   handful of tensor ops the models need, plus gradient masking and
//!   interchange (activation-patching) forward passes.
//! * [`scm`] — the synthetic data generator: examples are pure functions of
//!   `(config, u_seed, v_seed)`, so true counterfactuals are available by
//!   regeneration with one concept forced.
//! * [`model`] — the shared encoder architecture (embedding, mean pool, MLP)
//!   used by the black box, the proxies, and the concept predictor, with
//!   per-concept intervention sites in one hidden layer.
//! * [`train`] — losses (smoothed distillation CE, intervention token,
//!   interchange, multi-task probes), Adam, and the training loops with early
//!   stopping on the dev cosine ICaCE error.
//! * [`explain`] — effect estimators: the two proxy variants, an S-Learner,
//!   and the approximate / random / group-mean baselines.
//! * [`eval`] — ICaCE targets, distance metrics, benchmark aggregation,
//!   macro-F1, self-explanation scoring, and prediction/concept association.
//! * [`attribution`] — concept-mediated integrated gradients over token
//!   embeddings.
//! * [`dataset`] — JSON-lines readers/writers for examples, pairs, estimate
//!   dumps, and attribution dumps.

pub mod attribution;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod explain;
pub mod model;
pub mod rng;
pub mod scm;
pub mod train;

pub use error::{CoreError, Result};

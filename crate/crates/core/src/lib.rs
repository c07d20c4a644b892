//! Minimum-norm adversarial attacks on k-nearest-neighbor classifiers.
//!
//! The crate implements a gradient-based attack that finds small L2
//! perturbations flipping the prediction of a kNN classifier, in input
//! space or on top of learned neural features. The pieces:
//!
//! * [`dataset`] — in-memory labeled datasets: IDX and CSV loading,
//!   binary filtering, and synthetic 2-D generators.
//! * [`features`] — feature maps the classifier runs on: identity,
//!   small ReLU MLPs (with training), and mean-pool + PCA affine maps
//!   fitted over hidden layers.
//! * [`knn`] — the classifier itself: exhaustive kNN over one or more
//!   feature layers with deterministic tie-breaking and per-layer
//!   threshold (k-th distance) queries.
//! * [`attack`] — the attack: guide selection heuristics, the hinge and
//!   sigmoid objectives with exact gradients, RMSprop/Adam, restarts,
//!   and a binary search over the norm/loss trade-off.
//! * [`oracle`] — ground truth at small scale: the provably minimal
//!   perturbation by exhaustive search over neighbor subsets, plus a
//!   grid-based reference for two-dimensional sanity checks.
//! * [`harness`] — experiments: a TOML description of data, model and
//!   attack runs over a test set (in parallel, reproducibly) and comes
//!   back as a JSON-lines report with summary metrics.
//!
//! All floating-point work is `f64` and deterministic for a fixed seed:
//! no randomized hashing, no threading inside a single attack.

pub mod attack;
pub mod dataset;
pub mod error;
pub mod features;
pub mod harness;
pub mod knn;
pub mod oracle;

pub use error::{Error, Result};

//! Count bridges: endpoint-conditioned Poisson birth–death bridges on integer
//! lattices.
//!
//! The crate is organised bottom-up:
//!
//! - [`samplers`]: seedable RNG and exact discrete samplers (Poisson, Binomial,
//!   Hypergeometric, Bessel slack) with log-pmf evaluators.
//! - [`bridge`]: schedules, the forward corruption kernel and the reverse
//!   bridge step, plus ancestral sampling.
//! - [`scoring`]: energy score (unit and aggregate) and evaluation metrics.
//! - [`denoiser`]: noise-conditioned MLP trained on the negated energy score.
//! - [`deconv`]: aggregate projection, guided sampling and aggregate training.
//! - [`datasets`]: synthetic benchmark generators and CSV/JSON I/O.
//! - [`oracle`]: brute-force enumeration and entropic OT checks.
//! - [`verify`]: statistical test helpers and the verification suites.
//! - [`experiments`]: train, sample and evaluate helpers used by the CLI.

pub mod bridge;
pub mod datasets;
pub mod deconv;
pub mod denoiser;
pub mod error;
pub mod experiments;
pub mod oracle;
pub mod samplers;
pub mod scoring;
pub mod verify;

pub use error::{Error, Result};
pub use samplers::RngState;

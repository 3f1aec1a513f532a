//! Anonymous LDP reporting in the shuffle model.
//!
//! The crate is organised around the life of a report:
//!
//! - [`randomizers`]: on-device local randomizers (randomized response,
//!   attribute-fragmented k-RAPPOR, report fragmenting with a backstop).
//! - [`shuffler`]: simulated shuffler instances with per-channel buffers,
//!   uniform permutation or summation at release, and crowd thresholding.
//! - [`estimation`]: debiased histogram estimators and error metrics.
//! - [`accounting`]: closed-form amplification and composition bounds and
//!   their inverses.
//! - [`sgd`]: LDP-SGD clients and the debiased projected-SGD server.
//! - [`data`]: PGM grid datasets, power-law generators and CSV counts.
//! - [`experiment`]: the end-to-end runner behind the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod data;
pub mod estimation;
pub mod experiment;
pub mod randomizers;
pub mod rng;
pub mod sgd;
pub mod shuffler;

pub use rng::RandomStream;

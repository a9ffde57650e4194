//! Noisy-label learning toolkit.
//!
//! The crate covers three connected jobs:
//!
//! * synthesizing noisy datasets that mix clean examples, closed-world noise
//!   (another in-vocabulary class) and open-world noise (an out-of-vocabulary
//!   class), sampled according to word-embedding similarity between categories
//!   ([`embeddings`], [`noisegen`], [`dataio`]);
//! * evaluating classifiers with imbalance-aware metrics ([`metrics`]);
//! * a two-branch trainer that corrects labels with softmax-parameterized soft
//!   labels under a reverse cross-entropy loss, after filtering low-confidence
//!   examples through a two-component Gaussian mixture over prediction
//!   entropies ([`correction`], [`filtering`], [`trainer`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correction;
pub mod dataio;
pub mod embeddings;
pub mod error;
pub mod filtering;
pub mod math;
pub mod metrics;
pub mod noisegen;
pub mod trainer;

pub use error::{Error, Result};

//! CPU reference engine for customizable attention over block-sparse kv
//! caches.
//!
//! The building blocks, bottom up:
//!
//! - [`state`]: attention states (output, lse) and their merge operator —
//!   the reduction algebra everything else composes with;
//! - [`streaming`]: single-pass online-softmax attention over kv tiles;
//! - [`layout`]: ragged tensors, the block-sparse kv structure over a paged
//!   pool, shared-prefix decomposition and head-group fusion;
//! - [`variant`]: pluggable attention variants as hook bundles (masks,
//!   logits transforms, q/k/v/output transforms, softmax switch);
//! - [`schedule`]: the load-balanced planner mapping (request, tile, kv
//!   chunk) work onto CTA queues with a deterministic contraction order;
//! - [`runtime`]: the plan/run engine with its fixed-layout workspace;
//! - [`oracle`]: brute-force f64 reference implementation;
//! - [`workload`] and [`harness`]: seeded generators, verification and
//!   balance reporting for the CLI and test suites.

// indexed loops are the prevailing idiom in the tensor-walking code here
#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod harness;
pub mod layout;
pub mod oracle;
pub mod runtime;
pub mod scalar;
pub mod schedule;
pub mod state;
pub mod streaming;
pub mod variant;
pub mod workload;

pub use config::{operational_intensity, HeadConfig};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use state::{attention_state, lse_of_scores, merge_all, AttentionState, ScaleFreeState};

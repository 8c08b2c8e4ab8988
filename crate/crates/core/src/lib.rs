//! Pool-of-experts model specialization.
//!
//! A large "oracle" classifier is decomposed once into a shared library trunk
//! and a pool of tiny per-task expert heads. Any union of primitive tasks can
//! then be answered by wiring the library to the matching experts and
//! concatenating their logits, with no training at query time.

pub mod consolidate;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod instrument;
pub mod netzoo;
pub mod par;
pub mod rng;
pub mod store;
pub mod task;
pub mod tensor;

pub use error::{PoeError, Result};

#[cfg(any(test, feature = "oracle"))]
pub mod oracle;

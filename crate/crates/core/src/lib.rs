//! Decode-to-prefill KV-cache relaying on a deterministic toy transformer.
//!
//! An upstream agent's generated tokens usually reappear verbatim in the next
//! agent's prompt, under a different prefix. Instead of prefilling them again,
//! the KV produced while decoding them is captured ([`relay_store`]),
//! realigned to the new positions, and repaired only where it matters: a band
//! of layers found offline ([`profiler`]) and a sparse set of tokens picked at
//! run time ([`selector`]). [`engine`] executes the relay prefill and
//! [`harness`] drives multi-agent workflows against a full-prefill oracle.

pub mod engine;
pub mod error;
pub mod format;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod profiler;
pub mod relay_store;
pub mod selector;
pub mod tensor;

pub use error::{RelayError, Result};
pub use model::{CaptureFlags, KvContext, Model, ModelSpec};
pub use tensor::Tensor;

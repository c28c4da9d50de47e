//! Decoder-only transformer inference with a K-resident, V-offloaded KV
//! cache and TopN decode attention, plus the analytic cost model that
//! predicts when the scheme pays off.

pub mod attention;
pub mod engine;
pub mod error;
pub mod kvcache;
pub mod model;
pub mod perf;
pub mod reference;
pub mod rng;
pub mod sweep;
pub mod tensor;
pub mod verify;

pub use error::{KcError, Result};

/// Nine significant digits in scientific notation, the float format of all
/// CSV output.
pub fn fmt_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

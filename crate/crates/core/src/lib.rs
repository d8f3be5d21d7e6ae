mod error;
pub mod backstore;
pub mod btt;
pub mod fids;
pub mod harness;
pub mod ids;
pub mod observer;
pub mod simfs;
pub mod stats;
pub mod tracegen;

pub use error::{Error, Result};

/// Information quantities, bits.
pub type Bits = f64;
/// Histogram over the crate's default scalar.
pub type Histogram = stats::Histogram<f64>;
/// Exact probabilities such as the anonymity curve.
pub type Probability = num_rational::Ratio<u64>;

//! Toy-scale document transformer.

mod predictions;

pub use predictions::{affinity, sigmoid, softmax_rows, Predictions};

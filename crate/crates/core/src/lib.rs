// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod error;
pub mod graph;

pub use error::{GsrError, Result};
pub mod prior;
pub mod sensor;
pub mod signal;
pub mod training;
pub mod vb;

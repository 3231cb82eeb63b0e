//! Video mixture-of-block attention on CPU: spatio-temporal key-block
//! partitions, threshold/top-k block selection, block-sparse attention with
//! its backward pass, cost and concentration metrics, and a tiny training
//! harness.

pub mod attention;
pub mod error;
pub mod metrics;
pub mod partition;
pub mod selection;
pub mod tensor;
pub mod toytrain;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

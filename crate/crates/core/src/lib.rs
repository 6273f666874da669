//! Glass-box transformer engine and contextualization-analysis toolkit.

pub mod datasets;
pub mod harness;
pub mod interventions;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

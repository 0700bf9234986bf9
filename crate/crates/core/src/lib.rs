//! Fine-tuning from a source teacher to a target teacher under linear
//! labels: one-layer linear regression, deep linear networks and wide
//! two-layer ReLU networks, with closed-form limits and risk bounds.

pub mod datasets;
pub mod deep;
pub mod linalg;
pub mod linear;
pub mod ntk;
pub mod rng;
pub mod task;

pub use task::TaskVector;

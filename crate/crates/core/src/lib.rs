//! Temporal-support probing of frozen audio embeddings: storage, lightweight
//! probes with analytic gradients, training, metrics and sweep reports.

pub mod exec;
pub mod loss;
pub mod metrics;
pub mod probe;
pub mod runner;
pub mod store;
pub mod trainer;

pub use exec::Exec;
pub use store::segment_count;

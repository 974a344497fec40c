//! Learning-to-rank distillation: train blackbox base rankers, relabel
//! unseen queries from their rankings, fit tree-ensemble interpreters on
//! all or an interpretable subset of features, and measure how faithfully
//! the interpreters reproduce the base rankings.

pub mod data;
pub mod distill;
pub mod ltr;
pub mod metrics;
pub mod harness;
pub mod synthetic;

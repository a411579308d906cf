//! Closed-form optima and training for deep linear unconstrained-features
//! models, with metrics for measuring neural collapse.

pub mod cli;
pub mod io;
pub mod linalg;
pub mod model;
pub mod metrics;
pub mod theory;
pub mod trainer;

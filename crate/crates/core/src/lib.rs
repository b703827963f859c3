pub mod aggregate;
pub mod attacks;
pub mod autodiff;
pub mod corruptions;
pub mod data;
pub mod metrics;
pub mod models;
pub mod orchestrator;
pub mod rng;
pub mod trainer;

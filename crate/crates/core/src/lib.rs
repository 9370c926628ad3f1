//! Bayesian hierarchical comparison of methods evaluated by cross-validation
//! on several datasets.

pub mod analysis;
pub mod commands;
pub mod decision;
pub mod masks;
pub mod model;
pub mod report;
pub mod results;
pub mod sampler;
pub mod seed;
pub mod sensitivity;
pub mod synthetic;

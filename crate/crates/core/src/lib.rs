//! Counterfactual example generation with classifier-free diffusion
//! guidance and analytic neighborhood scores, plus the adversarial-training
//! and evaluation harness around it.

pub mod adversarial;
pub mod ce;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod idx;
pub mod neighborhood;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod seed;
pub mod special;
pub mod toy;

pub use error::{Error, Result};
pub use schedule::Schedule;

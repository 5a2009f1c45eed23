//! Explore-assess-adapt meta-optimization for knowledge distillation.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod morphism;
pub mod optim;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use error::{Ev3Error, Result};

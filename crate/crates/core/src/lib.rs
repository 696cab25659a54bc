pub mod concentration_lab;
pub mod config;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod latent_model;
pub mod linalg;
pub mod mechanisms;
pub mod query_protocol;
pub mod rng;
pub mod robustify;
pub mod stats;
pub mod valuation;

pub use error::{Error, Result};

//! Causally informed variable-step forecasting: a desk-scale pretraining
//! library for multimodal satellite image and weather series.

pub mod datamodel;
pub mod encoders;
pub mod error;
pub mod forecast_decode;
pub mod fusion;
pub mod harness;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod synthworld;
pub mod training;

pub use error::{Error, Result};

//! Multi-image guided 3D affordance grounding.
//!
//! A point-cloud encoder and an image encoder feed an iterative query module
//! that distils affordance tokens shared across several reference images.
//! The tokens form a dictionary that point features attend over before a
//! decoder predicts a per-point affordance heatmap.

pub mod adm;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod export;
pub mod iam;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

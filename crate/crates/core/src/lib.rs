//! Phase-sensitive OTDR toolkit: coherent Rayleigh backscatter simulation,
//! heterodyne demodulation into temporal-spatial matrices, image-pair dataset
//! construction, and a two-branch CNN + Bi-LSTM vibration classifier trained
//! from scratch on the CPU.

pub mod cli;
pub mod dataset;
pub mod demod;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod model;
pub mod nn;
pub mod sim;
pub mod util;

pub use error::{Error, Result};

//! Fault detection on distribution feeders with recurrent and
//! recurrent+graph neural networks.

pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod layers;
pub mod models;
pub mod seed;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};

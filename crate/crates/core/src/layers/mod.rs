//! Neural building blocks. Every layer works on a stack of `B` graphs with the
//! same `N` nodes, laid out as `(B*N) x D` row blocks.

mod gnn;
mod gru;
mod readout;

pub use gnn::{GatLayer, GatV2Layer, GcnLayer, GraphBatch, SageAggregator, SageLayer};
pub use gru::{GruCell, GruVars};
pub use readout::{maxpool_readout, BatchNormLayer, ClassifyHead};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Uniform(-s, s) initialization with `s = 1/sqrt(fan_in)`.
pub fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let s = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Learnable tensors of a layer, in a fixed order.
pub trait Params {
    fn param_names(&self) -> Vec<&'static str>;
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Registers every parameter on the tape, trainable or frozen.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect()
    }
}

use rand::Rng;

use super::{uniform_init, Params};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, Tape, Tensor, Var};

/// Column-wise max over the nodes of each graph in the stack.
///
/// `x` is `(B*N) x D`; returns `B x D`. Ties route the gradient to the
/// lowest node index.
pub fn maxpool_readout(tape: &mut Tape, x: Var, nodes: usize) -> Result<Var> {
    if nodes == 0 {
        return Err(Error::EmptyGraph("max-pool readout over zero nodes".into()));
    }
    let rows = tape.value(x).rows();
    if !rows.is_multiple_of(nodes) {
        return Err(Error::Dimension(format!(
            "readout: {rows} rows is not a multiple of {nodes} nodes"
        )));
    }
    let seg: Vec<usize> = (0..rows).map(|r| r / nodes).collect();
    tape.segment_max(x, &seg, rows / nodes)
}

/// Affine map from a pooled representation to one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifyHead {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform_init(&[in_dim], in_dim, rng),
            bias: uniform_init(&[1], in_dim, rng),
        }
    }

    /// `x` is `B x D`; returns `B` logits.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let d = self.weight.len();
        let w = tape.reshape(vars[0], &[d, 1])?;
        let z = tape.matmul(x, w)?;
        let z = tape.add_bias(z, vars[1])?;
        let b = tape.value(z).rows();
        tape.reshape(z, &[b])
    }
}

impl Params for ClassifyHead {
    fn param_names(&self) -> Vec<&'static str> {
        vec!["weight", "bias"]
    }
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Learnable scale/shift plus running statistics for [`Tape::batch_norm`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub state: BatchNormState,
}

impl BatchNormLayer {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::full(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
            state: BatchNormState::new(features),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, vars: &[Var], x: Var, training: bool) -> Result<Var> {
        tape.batch_norm(x, vars[0], vars[1], &mut self.state, training)
    }
}

impl Params for BatchNormLayer {
    fn param_names(&self) -> Vec<&'static str> {
        vec!["gamma", "beta"]
    }
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_takes_column_max() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let p = maxpool_readout(&mut tape, x, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, 5.0]);
        let single = maxpool_readout(&mut tape, x, 1).unwrap();
        assert_eq!(tape.value(single).data(), tape.value(x).data());
        assert!(matches!(maxpool_readout(&mut tape, x, 0), Err(Error::EmptyGraph(_))));
    }

    #[test]
    fn zero_head_gives_zero_logit() {
        let head = ClassifyHead {
            weight: Tensor::zeros(&[3]),
            bias: Tensor::zeros(&[1]),
        };
        let mut tape = Tape::new();
        let vars = head.bind(&mut tape, false);
        let x = tape.constant(Tensor::matrix(1, 3, vec![4.0, -1.0, 2.0]).unwrap());
        let z = head.forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0]);
    }
}

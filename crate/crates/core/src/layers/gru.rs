use rand::Rng;

use super::{uniform_init, Params};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Gated recurrent unit:
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// h~ = tanh(W_h x + U_h (r * h) + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
///
/// Input weights of the three paths are stored side by side in `w_x`
/// (`F x 3H`, order z|r|h), the recurrent z/r weights in `u_zr` (`H x 2H`).
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_x: Tensor,
    pub u_zr: Tensor,
    pub u_h: Tensor,
    pub bias: Tensor,
}

/// Tape handles for a bound [`GruCell`].
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_x: Var,
    pub u_zr: Var,
    pub u_h: Var,
    pub bias: Var,
}

impl GruVars {
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            w_x: v[0],
            u_zr: v[1],
            u_h: v[2],
            bias: v[3],
        }
    }
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let h = hidden_dim;
        Self {
            input_dim,
            hidden_dim,
            w_x: uniform_init(&[input_dim, 3 * h], input_dim, rng),
            u_zr: uniform_init(&[h, 2 * h], h, rng),
            u_h: uniform_init(&[h, h], h, rng),
            bias: uniform_init(&[3 * h], h, rng),
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let h = hidden_dim;
        Self {
            input_dim,
            hidden_dim,
            w_x: Tensor::zeros(&[input_dim, 3 * h]),
            u_zr: Tensor::zeros(&[h, 2 * h]),
            u_h: Tensor::zeros(&[h, h]),
            bias: Tensor::zeros(&[3 * h]),
        }
    }

    /// Runs `steps` GRU updates over `rows` independent sequences.
    ///
    /// `inputs` is `(steps*rows) x F`, step-major: rows `t*rows .. (t+1)*rows`
    /// hold the inputs of step `t`. Returns the final hidden state, `rows x H`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: GruVars,
        inputs: Var,
        steps: usize,
        rows: usize,
        h0: Option<Var>,
    ) -> Result<Var> {
        if steps == 0 {
            return Err(Error::EmptySequence);
        }
        let shape = tape.value(inputs).shape().to_vec();
        if shape != [steps * rows, self.input_dim] {
            return Err(Error::Dimension(format!(
                "gru input {shape:?}, expected [{}, {}]",
                steps * rows,
                self.input_dim
            )));
        }
        let h = self.hidden_dim;
        let mut state = match h0 {
            Some(v) => {
                if tape.value(v).shape() != [rows, h] {
                    return Err(Error::Dimension(format!(
                        "gru h0 {:?}, expected [{rows}, {h}]",
                        tape.value(v).shape()
                    )));
                }
                v
            }
            None => tape.constant(Tensor::zeros(&[rows, h])),
        };
        let xw = tape.matmul(inputs, vars.w_x)?;
        let xw = tape.add_bias(xw, vars.bias)?;
        for t in 0..steps {
            let r0 = t * rows;
            let xz = tape.slice2(xw, r0..r0 + rows, 0..h)?;
            let xr = tape.slice2(xw, r0..r0 + rows, h..2 * h)?;
            let xh = tape.slice2(xw, r0..r0 + rows, 2 * h..3 * h)?;
            let hu = tape.matmul(state, vars.u_zr)?;
            let hz = tape.slice2(hu, 0..rows, 0..h)?;
            let hr = tape.slice2(hu, 0..rows, h..2 * h)?;
            let z = tape.add(xz, hz)?;
            let z = tape.sigmoid(z)?;
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r)?;
            let rh = tape.mul(r, state)?;
            let rhu = tape.matmul(rh, vars.u_h)?;
            let cand = tape.add(xh, rhu)?;
            let cand = tape.tanh(cand)?;
            // h' = h + z * (h~ - h)
            let delta = tape.sub(cand, state)?;
            let step = tape.mul(z, delta)?;
            state = tape.add(state, step)?;
        }
        Ok(state)
    }

    /// Single-sequence convenience: `seq` is `S x F`, `h0` has length `H`.
    pub fn run_sequence(&self, tape: &mut Tape, vars: GruVars, seq: Var, h0: Option<Var>) -> Result<Var> {
        let shape = tape.value(seq).shape().to_vec();
        let steps = match shape.as_slice() {
            [s, f] if *f == self.input_dim => *s,
            _ => {
                return Err(Error::Dimension(format!(
                    "sequence {shape:?} for input dim {}",
                    self.input_dim
                )))
            }
        };
        let h0 = match h0 {
            Some(v) => Some(tape.reshape(v, &[1, self.hidden_dim])?),
            None => None,
        };
        let out = self.forward(tape, vars, seq, steps, 1, h0)?;
        tape.reshape(out, &[self.hidden_dim])
    }
}

impl Params for GruCell {
    fn param_names(&self) -> Vec<&'static str> {
        vec!["w_x", "u_zr", "u_h", "bias"]
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w_x, &self.u_zr, &self.u_h, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_x, &mut self.u_zr, &mut self.u_h, &mut self.bias]
    }
}

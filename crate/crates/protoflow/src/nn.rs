//! Small multilayer perceptrons on top of the tape.
//!
//! Hidden layers use fan-in-scaled uniform initialization; output layers
//! are zero-initialized by default so a freshly built network emits zeros
//! (and uniform mixture weights once a softmax is applied downstream).

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// A dense network: `sizes[0] -> sizes[1] -> ... -> sizes[last]` with the
/// activation applied after every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    activation: Activation,
}

/// Tape handles for one registration of an [`Mlp`]'s parameters.
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl Mlp {
    /// A zero-initialized network.
    pub fn new(sizes: &[usize], activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        assert!(sizes.iter().all(|&s| s > 0), "zero layer size");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            weights.push(Tensor::zeros(vec![w[1], w[0]]));
            biases.push(Tensor::zeros(vec![w[1]]));
        }
        Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            activation,
        }
    }

    /// Fan-in-scaled uniform init. With `zero_output` the final layer stays
    /// zero so the untrained network outputs the zero vector.
    pub fn init_fan_in<R: Rng>(&mut self, rng: &mut R, zero_output: bool) {
        let n_layers = self.weights.len();
        for l in 0..n_layers {
            if zero_output && l == n_layers - 1 {
                for v in self.weights[l].data_mut() {
                    *v = 0.0;
                }
                for v in self.biases[l].data_mut() {
                    *v = 0.0;
                }
                continue;
            }
            let fan_in = self.sizes[l] as f64;
            let bound = 1.0 / fan_in.sqrt();
            for v in self.weights[l].data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            for v in self.biases[l].data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum::<usize>()
            + self.biases.iter().map(Tensor::len).sum::<usize>()
    }

    /// Visits every parameter tensor in a stable order.
    pub fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        for l in 0..self.weights.len() {
            f(&self.weights[l]);
            f(&self.biases[l]);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for l in 0..self.weights.len() {
            f(&mut self.weights[l]);
            f(&mut self.biases[l]);
        }
    }

    /// Plain forward pass, no gradient recording.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::RejectedInput(format!(
                "MLP expects input of length {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let mut x = input.to_vec();
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let (m, n) = (self.sizes[l + 1], self.sizes[l]);
            let wd = self.weights[l].data();
            let bd = self.biases[l].data();
            let mut y = vec![0.0; m];
            for (i, yi) in y.iter_mut().enumerate() {
                let row = &wd[i * n..(i + 1) * n];
                let mut s = 0.0;
                for j in 0..n {
                    s += row[j] * x[j];
                }
                *yi = s + bd[i];
            }
            if l != last {
                match self.activation {
                    Activation::Tanh => y.iter_mut().for_each(|v| *v = v.tanh()),
                    Activation::Relu => y.iter_mut().for_each(|v| *v = v.max(0.0)),
                }
            }
            x = y;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault("non-finite MLP output".into()));
        }
        Ok(x)
    }

    /// Registers this network's parameters as tape leaves.
    pub fn vars(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }

    /// Forward pass on the tape through previously registered vars.
    pub fn forward_on(&self, tape: &mut Tape, vars: &MlpVars, input: Var) -> Var {
        debug_assert_eq!(tape.value(input).len(), self.input_dim());
        let mut x = input;
        let last = vars.weights.len() - 1;
        for l in 0..vars.weights.len() {
            let lin = tape.matvec(vars.weights[l], x);
            x = tape.add(lin, vars.biases[l]);
            if l != last {
                x = match self.activation {
                    Activation::Tanh => tape.tanh(x),
                    Activation::Relu => tape.relu(x),
                };
            }
        }
        x
    }
}

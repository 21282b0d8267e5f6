use super::{orthogonal, Module};
use crate::error::{invalid, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;

/// Fully connected ReLU network with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// Orthogonal weights (gain √2 ahead of a ReLU, 1 on the output layer), zero biases.
pub fn build_mlp<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Mlp> {
    if sizes.len() < 2 {
        return invalid(format!("an MLP needs input and output sizes, got {sizes:?}"));
    }
    if sizes.contains(&0) {
        return invalid(format!("zero-width layer in {sizes:?}"));
    }
    let layers = sizes.len() - 1;
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for l in 0..layers {
        let gain = if l + 1 < layers { 2f64.sqrt() } else { 1.0 };
        weights.push(orthogonal(&[sizes[l + 1], sizes[l]], gain, rng));
        biases.push(Tensor::zeros(&[sizes[l + 1]]));
    }
    Ok(Mlp {
        sizes: sizes.to_vec(),
        weights,
        biases,
    })
}

impl Mlp {
    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    /// Scales the output layer, used to start critics near zero.
    pub fn scale_output_layer(&mut self, factor: f64) {
        if let Some(w) = self.weights.last_mut() {
            w.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Forward pass with parameters bound by [`super::bind`] (weights then biases).
pub fn mlp_forward(tape: &mut Tape, mlp: &Mlp, vars: &[Var], x: Var) -> Result<Var> {
    let layers = mlp.layers();
    if vars.len() != 2 * layers {
        return invalid("bound variables do not match the MLP");
    }
    let mut h = x;
    for l in 0..layers {
        h = tape.linear(h, vars[l], Some(vars[layers + l]))?;
        if l + 1 < layers {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

impl Module for Mlp {
    fn parameters(&self) -> Vec<&Tensor> {
        self.weights.iter().chain(&self.biases).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }

    fn parameter_names(&self) -> Vec<String> {
        (0..self.layers())
            .map(|l| format!("{l}.weight"))
            .chain((0..self.layers()).map(|l| format!("{l}.bias")))
            .collect()
    }
}

//! Network building blocks: convolutional encoders, MLPs, initialisation,
//! Adam and Polyak averaging.

mod encoder;
mod init;
mod mlp;
mod optim;

pub use encoder::{Encoder, EncoderConfig, EncoderOutput, LixPlacement, Mixing};
pub use init::orthogonal;
pub use mlp::{build_mlp, mlp_forward, Mlp};
pub use optim::{polyak_update, Adam, AdamConfig};

use crate::error::{invalid, Result};
use crate::tensor::{Grads, Tape, Tensor, Var};

/// A named, ordered collection of parameter tensors.
pub trait Module {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
    fn parameter_names(&self) -> Vec<String>;

    fn zero_grad(&mut self) {
        self.parameters_mut().into_iter().for_each(Tensor::zero_grad);
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }
}

/// Records every parameter of `module` on the tape, in `parameters()` order.
/// With `trainable = false` the parameters are recorded as constants.
pub fn bind<M: Module + ?Sized>(tape: &mut Tape, module: &M, trainable: bool) -> Vec<Var> {
    module
        .parameters()
        .into_iter()
        .map(|p| {
            if trainable {
                let mut t = p.clone();
                t.requires_grad = true;
                t.grad = None;
                tape.leaf(&t)
            } else {
                tape.constant(p)
            }
        })
        .collect()
}

/// Accumulates the gradients of bound parameters into `module`.
pub fn collect_grads<M: Module + ?Sized>(grads: &Grads, vars: &[Var], module: &mut M) -> Result<()> {
    let params = module.parameters_mut();
    if params.len() != vars.len() {
        return invalid("bound variables do not match module parameters");
    }
    for (p, v) in params.into_iter().zip(vars) {
        grads.write_into(*v, p)?;
    }
    Ok(())
}

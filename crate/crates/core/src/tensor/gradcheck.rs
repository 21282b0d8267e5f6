use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst disagreement between autodiff and central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input index, element index)` where the maximum occurred.
    pub worst: (usize, usize),
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.scalar(out)?;
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite function value during gradient check".into()));
    }
    Ok((tape, vars, out))
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`, over every element of every input.
///
/// The relative error of one element is
/// `|autodiff − fd| / max(|fd|, 1e−8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = evaluate(&f, inputs)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
    };
    let mut probe = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[ti].len());
        for e in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[e];
            probe[ti].data_mut()[e] = orig + eps;
            let (tp, _, op) = evaluate(&f, &probe)?;
            let plus = tp.scalar(op)?;
            probe[ti].data_mut()[e] = orig - eps;
            let (tm, _, om) = evaluate(&f, &probe)?;
            let minus = tm.scalar(om)?;
            probe[ti].data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let rel = (analytic[e] - fd).abs() / fd.abs().max(1e-8);
            if !rel.is_finite() {
                return Err(Error::Numeric("non-finite gradient during gradient check".into()));
            }
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (ti, e);
            }
        }
    }
    Ok(report)
}

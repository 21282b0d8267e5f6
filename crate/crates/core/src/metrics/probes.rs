//! Encoder sensitivity probes.

use crate::error::{invalid, Result};
use crate::nn::{bind, Encoder, Mixing};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

/// Estimates `sqrt(mean_b ‖J_b‖²_F)` for a per-sample map `f` over a batch,
/// using `E_v[‖Jᵀv‖²] = ‖J‖²_F` with standard-normal output probes `v`.
///
/// `f` must treat batch elements independently.
pub fn jacobian_frobenius_of<F, R>(f: F, batch: &Tensor, n_probes: usize, rng: &mut R) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    R: Rng + ?Sized,
{
    if n_probes == 0 {
        return invalid("at least one probe is required");
    }
    let b = batch.shape().first().copied().unwrap_or(0);
    let mut tape = Tape::new();
    let mut input = batch.clone();
    input.requires_grad = true;
    let x = tape.leaf(&input);
    let y = f(&mut tape, x)?;
    let out_len = tape.value(y).len();
    let mut total = 0.0;
    for _ in 0..n_probes {
        let v: Vec<f64> = (0..out_len).map(|_| rng.sample(StandardNormal)).collect();
        let grads = tape.backward_from(y, &v)?;
        total += grads.get(x).map_or(0.0, |g| g.iter().map(|g| g * g).sum::<f64>());
    }
    Ok((total / n_probes as f64 / b as f64).sqrt())
}

/// Sensitivity of the encoder's final convolutional features to its input,
/// with mixing disabled.
pub fn jacobian_frobenius<R: Rng + ?Sized>(enc: &Encoder, batch: &Tensor, n_probes: usize, rng: &mut R) -> Result<f64> {
    jacobian_frobenius_of(
        |tape, x| {
            let vars = bind(tape, enc, false);
            Ok(enc.forward(tape, &vars, x, &mut Mixing::Off)?.conv_features)
        },
        batch,
        n_probes,
        rng,
    )
}

/// `(−1)^(i+j)` over an `h×w` grid.
pub fn checkerboard_pattern(h: usize, w: usize) -> Vec<f64> {
    (0..h * w)
        .map(|k| if (k / w + k % w) % 2 == 0 { 1.0 } else { -1.0 })
        .collect()
}

/// Adds `α · max(z_bc) · checkerboard` to every feature map `z_bc` and
/// evaluates `loss` on the perturbed features, for each amplitude `α`.
pub fn checkerboard_probe<F>(features: &Tensor, amplitudes: &[f64], mut loss: F) -> Result<Vec<(f64, f64)>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if amplitudes.is_empty() {
        return invalid("at least one amplitude is required");
    }
    let s = features.shape();
    if s.len() != 4 {
        return invalid(format!("checkerboard probe expects [B,C,H,W], got {s:?}"));
    }
    let area = s[2] * s[3];
    let pattern = checkerboard_pattern(s[2], s[3]);
    let maxima: Vec<f64> = features
        .data()
        .chunks(area)
        .map(|m| m.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut curve = Vec::with_capacity(amplitudes.len());
    for &alpha in amplitudes {
        let mut data = features.data().to_vec();
        if alpha != 0.0 {
            for (m, chunk) in data.chunks_mut(area).enumerate() {
                let scale = alpha * maxima[m];
                chunk.iter_mut().zip(&pattern).for_each(|(z, p)| *z += scale * p);
            }
        }
        let perturbed = Tensor::new(s, data)?;
        curve.push((alpha, loss(&perturbed)?));
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_map_estimate_converges_to_frobenius_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Tensor::uniform(&[8, 10], -1.0, 1.0, &mut rng);
        let exact = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let batch = Tensor::uniform(&[4, 10], -1.0, 1.0, &mut rng);
        let f = |w: Tensor| {
            move |tape: &mut Tape, x: Var| {
                let wv = tape.constant(&w);
                tape.linear(x, wv, None)
            }
        };
        let est = jacobian_frobenius_of(f(w.clone()), &batch, 256, &mut rng).unwrap();
        assert!((est - exact).abs() / exact < 0.05, "{est} vs {exact}");

        let zero = jacobian_frobenius_of(f(Tensor::zeros(&[8, 10])), &batch, 16, &mut rng).unwrap();
        assert_eq!(zero, 0.0);

        // Same probe draws: doubling the weights doubles the estimate exactly.
        let doubled = Tensor::new(&[8, 10], w.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let a = jacobian_frobenius_of(f(w), &batch, 32, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = jacobian_frobenius_of(f(doubled), &batch, 32, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12 * b);
    }

    #[test]
    fn checkerboard_probe_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::uniform(&[2, 3, 4, 4], 0.0, 1.0, &mut rng);
        let sq = |t: &Tensor| Ok(t.data().iter().map(|v| v * v).sum::<f64>());
        let curve = checkerboard_probe(&z, &[0.0, 0.5, 1.0], sq).unwrap();
        assert_eq!(curve[0].1, sq(&z).unwrap());
        assert_eq!(curve, checkerboard_probe(&z, &[0.0, 0.5, 1.0], sq).unwrap());
        assert!(curve[2].1 > curve[0].1);
        let flat = checkerboard_probe(&z, &[0.0, 0.5, 1.0], |_| Ok(3.0)).unwrap();
        assert!(flat.iter().all(|&(_, l)| l == 3.0));
        assert!(checkerboard_probe(&z, &[], sq).is_err());
    }
}

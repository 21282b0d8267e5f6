use super::Module;
use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments, one moment buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl Adam {
    pub fn new<M: Module + ?Sized>(config: AdamConfig, module: &M) -> Self {
        let shapes: Vec<usize> = module.parameters().iter().map(|p| p.len()).collect();
        Self {
            config,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    /// Applies one update from the accumulated gradients and clears them.
    /// Parameters without a gradient are left untouched.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M) -> Result<()> {
        let params = module.parameters_mut();
        if params.len() != self.m.len() {
            return invalid("optimizer state does not match the module");
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let g = match p.grad.take() {
                Some(g) => g,
                None => continue,
            };
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `target ← ρ·target + (1 − ρ)·online`, elementwise over congruent modules.
pub fn polyak_update<M: Module + ?Sized>(target: &mut M, online: &M, rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return invalid(format!("Polyak coefficient must lie in [0, 1], got {rho}"));
    }
    let src = online.parameters();
    let dst = target.parameters_mut();
    if src.len() != dst.len() || src.iter().zip(&dst).any(|(a, b)| a.shape() != b.shape()) {
        return invalid("target and online parameter trees differ");
    }
    for (t, o) in dst.into_iter().zip(src) {
        t.data_mut()
            .iter_mut()
            .zip(o.data())
            .for_each(|(t, o)| *t = rho * *t + (1.0 - rho) * o);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_mlp, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn filled(value: f64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = build_mlp(&[2, 2], &mut rng).unwrap();
        for p in m.parameters_mut() {
            p.data_mut().fill(value);
        }
        m
    }

    #[test]
    fn polyak_edge_coefficients() {
        let online = filled(2.0);
        let mut t = filled(0.0);
        polyak_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t, online);
        let mut t = filled(0.0);
        polyak_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t, filled(0.0));
        polyak_update(&mut t, &online, 0.5).unwrap();
        assert!(t.parameters().iter().all(|p| p.data().iter().all(|&v| v == 1.0)));
        assert!(polyak_update(&mut t, &online, 1.5).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let other = build_mlp(&[3, 2], &mut rng).unwrap();
        assert!(polyak_update(&mut t, &other, 0.5).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient() {
        let mut m = filled(1.0);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &m,
        );
        for p in m.parameters_mut() {
            let n = p.len();
            p.accumulate_grad(&vec![3.0; n]).unwrap();
        }
        opt.step(&mut m).unwrap();
        for p in m.parameters() {
            assert!(p.data().iter().all(|&v| (v - 0.9).abs() < 1e-6));
            assert!(p.grad.is_none());
        }
    }
}

//! Local signal mixing: each feature is replaced by a bilinear interpolation
//! of its own feature map at a randomly shifted coordinate.
//!
//! The forward pass is a convex combination of four neighbours; the backward
//! pass scatters each incoming gradient to the same four neighbours with the
//! same weights, so the two are exact transposes of one another.

mod augment;

pub use augment::{random_shift_aug, shift_crop};

use crate::error::{invalid, Result};
use crate::tensor::{BackwardRuleBox, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// How shift draws are shared across a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftGranularity {
    /// Independent `(δx, δy)` for every batch element and spatial location.
    #[default]
    PerLocation,
    /// One `(δx, δy)` per batch element.
    PerImage,
}

/// Continuous per-location shifts in `[−radius, radius]`, shared by all channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftField {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub radius: f64,
    /// Row-axis shifts, `[batch, height, width]`.
    pub dx: Vec<f64>,
    /// Column-axis shifts, `[batch, height, width]`.
    pub dy: Vec<f64>,
}

impl ShiftField {
    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        let n = batch * height * width;
        Self {
            batch,
            height,
            width,
            radius: 0.0,
            dx: vec![0.0; n],
            dy: vec![0.0; n],
        }
    }

    /// Same shift at every location.
    pub fn uniform(batch: usize, height: usize, width: usize, dx: f64, dy: f64) -> Self {
        let n = batch * height * width;
        Self {
            batch,
            height,
            width,
            radius: dx.abs().max(dy.abs()),
            dx: vec![dx; n],
            dy: vec![dy; n],
        }
    }
}

/// Draws a shift field.
///
/// A single key is taken from `rng`; each batch element then reads its own
/// ChaCha stream under that key, so the field does not depend on the order in
/// which batch elements are generated.
pub fn sample_shift_field<R: Rng + ?Sized>(
    batch: usize,
    height: usize,
    width: usize,
    radius: f64,
    granularity: ShiftGranularity,
    rng: &mut R,
) -> Result<ShiftField> {
    if radius.is_nan() || radius < 0.0 || radius.is_infinite() {
        return invalid(format!(
            "shift radius must be a non-negative finite number, got {radius}"
        ));
    }
    let key: u64 = rng.random();
    if radius == 0.0 {
        return Ok(ShiftField::zeros(batch, height, width));
    }
    let area = height * width;
    let mut dx = vec![0.0; batch * area];
    let mut dy = vec![0.0; batch * area];
    for b in 0..batch {
        let mut sub = ChaCha8Rng::seed_from_u64(key);
        sub.set_stream(b as u64);
        let (xs, ys) = (&mut dx[b * area..(b + 1) * area], &mut dy[b * area..(b + 1) * area]);
        match granularity {
            ShiftGranularity::PerLocation => {
                for (x, y) in xs.iter_mut().zip(ys.iter_mut()) {
                    *x = sub.random_range(-radius..=radius);
                    *y = sub.random_range(-radius..=radius);
                }
            }
            ShiftGranularity::PerImage => {
                let (x, y) = (sub.random_range(-radius..=radius), sub.random_range(-radius..=radius));
                xs.fill(x);
                ys.fill(y);
            }
        }
    }
    Ok(ShiftField {
        batch,
        height,
        width,
        radius,
        dx,
        dy,
    })
}

/// Bilinear neighbours and weights of every `(batch, row, column)` location.
#[derive(Debug, Clone)]
pub struct MixWeights {
    pub height: usize,
    pub width: usize,
    /// Flat in-map offsets of the `(⌊ĩ⌋,⌊j̃⌋)`, `(⌊ĩ⌋,⌈j̃⌉)`, `(⌈ĩ⌉,⌊j̃⌋)`, `(⌈ĩ⌉,⌈j̃⌉)` neighbours.
    pub neighbors: Vec<[usize; 4]>,
    pub weights: Vec<[f64; 4]>,
}

/// Floor index, clamped ceiling index and fractional part along one axis.
#[inline]
fn axis_split(coord: f64, extent: usize) -> (usize, usize, f64) {
    let max = (extent - 1) as f64;
    let c = coord.clamp(0.0, max);
    let lo = c.floor();
    let frac = c - lo;
    let lo = lo as usize;
    // ⌈·⌉ is taken as ⌊·⌋ + 1 so an integral coordinate puts all weight on ⌊·⌋.
    let hi = (lo + 1).min(extent - 1);
    (lo, hi, frac)
}

impl MixWeights {
    /// True when every location keeps its own value with weight one.
    pub fn is_identity(&self) -> bool {
        let area = self.height * self.width;
        self.weights
            .iter()
            .zip(&self.neighbors)
            .enumerate()
            .all(|(k, (w, n))| w[0] == 1.0 && n[0] == k % area)
    }

    pub fn from_shifts(shifts: &ShiftField) -> Self {
        let (h, w) = (shifts.height, shifts.width);
        let n = shifts.batch * h * w;
        let mut neighbors = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for idx in 0..n {
            let loc = idx % (h * w);
            let (i, j) = (loc / w, loc % w);
            let (i0, i1, fi) = axis_split(i as f64 + shifts.dx[idx], h);
            let (j0, j1, fj) = axis_split(j as f64 + shifts.dy[idx], w);
            neighbors.push([i0 * w + j0, i0 * w + j1, i1 * w + j0, i1 * w + j1]);
            weights.push([(1.0 - fi) * (1.0 - fj), (1.0 - fi) * fj, fi * (1.0 - fj), fi * fj]);
        }
        Self {
            height: h,
            width: w,
            neighbors,
            weights,
        }
    }
}

fn check_compatible(shape: &[usize], shifts: &ShiftField) -> Result<(usize, usize)> {
    if shape.len() != 4 {
        return invalid(format!("mixing expects [B,C,H,W], got {shape:?}"));
    }
    if shape[0] != shifts.batch || shape[2] != shifts.height || shape[3] != shifts.width {
        return invalid(format!(
            "shift field [{}, {}, {}] does not match feature map {shape:?}",
            shifts.batch, shifts.height, shifts.width
        ));
    }
    Ok((shape[1], shape[2] * shape[3]))
}

fn mix_forward(values: &[f64], batch: usize, channels: usize, plan: &MixWeights) -> Vec<f64> {
    if plan.is_identity() {
        return values.to_vec();
    }
    let area = plan.height * plan.width;
    let mut out = vec![0.0; values.len()];
    for b in 0..batch {
        let nb = &plan.neighbors[b * area..(b + 1) * area];
        let wb = &plan.weights[b * area..(b + 1) * area];
        for c in 0..channels {
            let base = (b * channels + c) * area;
            let src = &values[base..base + area];
            let dst = &mut out[base..base + area];
            for ((o, n), w) in dst.iter_mut().zip(nb).zip(wb) {
                *o = src[n[0]] * w[0] + src[n[1]] * w[1] + src[n[2]] * w[2] + src[n[3]] * w[3];
            }
        }
    }
    out
}

fn mix_backward(grad_out: &[f64], batch: usize, channels: usize, plan: &MixWeights) -> Vec<f64> {
    if plan.is_identity() {
        return grad_out.to_vec();
    }
    let area = plan.height * plan.width;
    let mut grad_in = vec![0.0; grad_out.len()];
    for b in 0..batch {
        let nb = &plan.neighbors[b * area..(b + 1) * area];
        let wb = &plan.weights[b * area..(b + 1) * area];
        for c in 0..channels {
            let base = (b * channels + c) * area;
            let src = &grad_out[base..base + area];
            let dst = &mut grad_in[base..base + area];
            for ((g, n), w) in src.iter().zip(nb).zip(wb) {
                for k in 0..4 {
                    dst[n[k]] += g * w[k];
                }
            }
        }
    }
    grad_in
}

/// `ẑ = mix(z)` for a `[B,C,H,W]` feature map.
pub fn lix_forward(z: &Tensor, shifts: &ShiftField) -> Result<Tensor> {
    let (channels, _) = check_compatible(z.shape(), shifts)?;
    let plan = MixWeights::from_shifts(shifts);
    Tensor::new(z.shape(), mix_forward(z.data(), shifts.batch, channels, &plan))
}

/// Transpose of [`lix_forward`] under the same shifts.
pub fn lix_backward(grad_out: &Tensor, shifts: &ShiftField) -> Result<Tensor> {
    let (channels, _) = check_compatible(grad_out.shape(), shifts)?;
    let plan = MixWeights::from_shifts(shifts);
    Tensor::new(
        grad_out.shape(),
        mix_backward(grad_out.data(), shifts.batch, channels, &plan),
    )
}

struct MixRule {
    batch: usize,
    channels: usize,
    plan: Arc<MixWeights>,
}

impl crate::tensor::BackwardRule for MixRule {
    fn backward(&self, grad_out: &[f64], _inputs: &[&[f64]]) -> Vec<Option<Vec<f64>>> {
        vec![Some(mix_backward(grad_out, self.batch, self.channels, &self.plan))]
    }
}

/// Records the mixing layer on a tape.
pub fn lix(tape: &mut Tape, z: Var, shifts: &ShiftField) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    let (channels, _) = check_compatible(&shape, shifts)?;
    let plan = Arc::new(MixWeights::from_shifts(shifts));
    let out = mix_forward(tape.value(z), shifts.batch, channels, &plan);
    let rule: BackwardRuleBox = Box::new(MixRule {
        batch: shifts.batch,
        channels,
        plan,
    });
    tape.custom(&[z], shape, out, rule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Scalar-loop bilinear sample with clamped coordinates.
    fn oracle_sample(map: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let at = |r: usize, c: usize| map[r * w + c];
        at(y0, x0) * (1.0 - fy) * (1.0 - fx)
            + at(y0, x1) * (1.0 - fy) * fx
            + at(y1, x0) * fy * (1.0 - fx)
            + at(y1, x1) * fy * fx
    }

    #[test]
    fn zero_radius_field_is_zero() {
        let f = sample_shift_field(2, 3, 3, 0.0, ShiftGranularity::PerLocation, &mut rng(1)).unwrap();
        assert!(f.dx.iter().chain(&f.dy).all(|&v| v == 0.0));
        assert!(sample_shift_field(1, 2, 2, -0.1, ShiftGranularity::PerLocation, &mut rng(1)).is_err());
    }

    #[test]
    fn shift_draws_are_centred_and_bounded() {
        let f = sample_shift_field(1000, 25, 20, 1.0, ShiftGranularity::PerLocation, &mut rng(2)).unwrap();
        let n = f.dx.len() as f64;
        assert_eq!(n, 500_000.0);
        let all: Vec<f64> = f.dx.iter().chain(&f.dy).copied().collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        // Var(U[−1,1]) = 1/3
        let se = (1.0f64 / 3.0 / all.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
        assert!(all.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn shift_field_is_seed_deterministic() {
        let a = sample_shift_field(3, 4, 4, 0.7, ShiftGranularity::PerLocation, &mut rng(9)).unwrap();
        let b = sample_shift_field(3, 4, 4, 0.7, ShiftGranularity::PerLocation, &mut rng(9)).unwrap();
        assert_eq!(a, b);
        let img = sample_shift_field(2, 3, 3, 0.7, ShiftGranularity::PerImage, &mut rng(9)).unwrap();
        assert!(img.dx[..9].iter().all(|&v| v == img.dx[0]));
        assert_ne!(img.dx[0], img.dx[9]);
    }

    #[test]
    fn identity_at_zero_shift() {
        let z = Tensor::uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut rng(3));
        let out = lix_forward(&z, &ShiftField::zeros(2, 4, 5)).unwrap();
        assert_eq!(out, z);
        let back = lix_backward(&z, &ShiftField::zeros(2, 4, 5)).unwrap();
        assert_eq!(back, z);
    }

    #[test]
    fn half_shift_averages_four_neighbours() {
        let z = Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let s = ShiftField::uniform(1, 2, 2, 0.5, 0.5);
        let out = lix_forward(&z, &s).unwrap();
        assert_eq!(out.data()[0], 2.5);

        let mut g = Tensor::zeros(&[1, 1, 2, 2]);
        g.data_mut()[0] = 1.0;
        let back = lix_backward(&g, &s).unwrap();
        assert_eq!(back.data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn matches_scalar_oracle_and_stays_within_neighbours() {
        let mut r = rng(4);
        let z = Tensor::uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut r);
        let s = sample_shift_field(2, 5, 5, 1.3, ShiftGranularity::PerLocation, &mut r).unwrap();
        let out = lix_forward(&z, &s).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let map = &z.data()[(b * 3 + c) * 25..(b * 3 + c + 1) * 25];
                for i in 0..5 {
                    for j in 0..5 {
                        let k = b * 25 + i * 5 + j;
                        let want = oracle_sample(map, 5, 5, i as f64 + s.dx[k], j as f64 + s.dy[k]);
                        let got = out.data()[(b * 3 + c) * 25 + i * 5 + j];
                        assert!((got - want).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn weights_partition_unity_and_clamp() {
        let s = sample_shift_field(4, 6, 7, 2.5, ShiftGranularity::PerLocation, &mut rng(5)).unwrap();
        let plan = MixWeights::from_shifts(&s);
        for (w, n) in plan.weights.iter().zip(&plan.neighbors) {
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
            assert!(w.iter().all(|&v| v >= 0.0));
            assert!(n.iter().all(|&i| i < 42));
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let z = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(lix_forward(&z, &ShiftField::zeros(1, 3, 4)).is_err());
        assert!(lix_backward(&z, &ShiftField::zeros(2, 3, 3)).is_err());
        assert!(lix_forward(&Tensor::zeros(&[3, 3]), &ShiftField::zeros(1, 3, 3)).is_err());
    }

    #[test]
    fn expectation_is_separable_triangle_kernel() {
        // For S ≤ 1 an interior location mixes rows i−1, i, i+1 with expected
        // weights (S/4, 1 − S/2, S/4), and likewise for columns.
        let radius = 0.8;
        let (h, w) = (5, 5);
        let z = Tensor::uniform(&[1, 1, h, w], -1.0, 1.0, &mut rng(6));
        let draws = 20_000;
        let mut acc = vec![0.0; h * w];
        let mut r = rng(7);
        for _ in 0..draws {
            let s = sample_shift_field(1, h, w, radius, ShiftGranularity::PerLocation, &mut r).unwrap();
            let out = lix_forward(&z, &s).unwrap();
            acc.iter_mut().zip(out.data()).for_each(|(a, v)| *a += v / draws as f64);
        }
        let k = [radius / 4.0, 1.0 - radius / 2.0, radius / 4.0];
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                let mut want = 0.0;
                for (di, ki) in k.iter().enumerate() {
                    for (dj, kj) in k.iter().enumerate() {
                        want += ki * kj * z.data()[(i + di - 1) * w + (j + dj - 1)];
                    }
                }
                assert!(
                    (acc[i * w + j] - want).abs() < 0.01,
                    "({i},{j}) {} vs {want}",
                    acc[i * w + j]
                );
            }
        }
    }

    #[test]
    fn tape_layer_uses_transpose_rule() {
        let mut r = rng(8);
        let z = Tensor::uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut r).with_grad();
        let g = Tensor::uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut r);
        let s = sample_shift_field(2, 4, 4, 1.0, ShiftGranularity::PerLocation, &mut r).unwrap();
        let mut tape = Tape::new();
        let zv = tape.leaf(&z);
        let out = lix(&mut tape, zv, &s).unwrap();
        let grads = tape.backward_from(out, g.data()).unwrap();
        let want = lix_backward(&g, &s).unwrap();
        assert_eq!(grads.get(zv).unwrap(), want.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn forward_and_backward_are_adjoint(seed in any::<u64>(), radius in 0.0f64..3.0) {
            let mut r = rng(seed);
            let z = Tensor::uniform(&[2, 2, 5, 6], -1.0, 1.0, &mut r);
            let g = Tensor::uniform(&[2, 2, 5, 6], -1.0, 1.0, &mut r);
            let s = sample_shift_field(2, 5, 6, radius, ShiftGranularity::PerLocation, &mut r).unwrap();
            let lz = lix_forward(&z, &s).unwrap();
            let ltg = lix_backward(&g, &s).unwrap();
            let lhs: f64 = lz.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = z.data().iter().zip(ltg.data()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-10);
            let mass_in: f64 = g.data().iter().sum();
            let mass_out: f64 = ltg.data().iter().sum();
            prop_assert!((mass_in - mass_out).abs() <= 1e-12);
        }

        #[test]
        fn outputs_are_convex_combinations(seed in any::<u64>(), radius in 0.0f64..3.0) {
            let mut r = rng(seed);
            let z = Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
            let s = sample_shift_field(1, 4, 4, radius, ShiftGranularity::PerLocation, &mut r).unwrap();
            let out = lix_forward(&z, &s).unwrap();
            let plan = MixWeights::from_shifts(&s);
            for c in 0..2 {
                let map = &z.data()[c * 16..(c + 1) * 16];
                for loc in 0..16 {
                    let n = plan.neighbors[loc];
                    let lo = n.iter().map(|&i| map[i]).fold(f64::INFINITY, f64::min);
                    let hi = n.iter().map(|&i| map[i]).fold(f64::NEG_INFINITY, f64::max);
                    let v = out.data()[c * 16 + loc];
                    prop_assert!(v >= lo - 1e-15 && v <= hi + 1e-15);
                }
            }
        }
    }
}

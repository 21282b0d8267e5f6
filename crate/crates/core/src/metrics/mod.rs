//! Diagnostics: local discontinuity, normalized-discontinuity scores,
//! accumulated scores, Pearson correlation and encoder sensitivity probes.

mod probes;

pub use probes::{checkerboard_pattern, checkerboard_probe, jacobian_frobenius, jacobian_frobenius_of};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// How the unit directions of the discontinuity estimator are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionSampling {
    /// `K` fixed directions at angles `2πk/K`.
    #[default]
    Equiangular,
    /// `K` angles drawn uniformly on every call.
    MonteCarlo,
}

/// Aggregation over locations of the robust score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean over channels and locations (resolution independent).
    #[default]
    Mean,
    /// Sum over channels and locations.
    Sum,
}

/// Which locations enter the scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// Every location; off-grid samples are clamped to the map.
    #[default]
    Clamp,
    /// Only locations at least one cell away from every border.
    InteriorOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NdConfig {
    pub directions: usize,
    pub sampling: DirectionSampling,
    pub epsilon: f64,
    pub aggregation: Aggregation,
    pub boundary: Boundary,
}

impl Default for NdConfig {
    fn default() -> Self {
        Self {
            directions: 8,
            sampling: DirectionSampling::Equiangular,
            epsilon: 1e-12,
            aggregation: Aggregation::Mean,
            boundary: Boundary::Clamp,
        }
    }
}

impl NdConfig {
    /// Unit vectors `(row, column)` used for one evaluation.
    pub fn direction_set<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<(f64, f64)>> {
        if self.directions == 0 {
            return invalid("at least one direction is required");
        }
        let k = self.directions;
        Ok(match self.sampling {
            DirectionSampling::Equiangular => (0..k)
                .map(|i| {
                    let t = 2.0 * PI * i as f64 / k as f64;
                    (t.cos(), t.sin())
                })
                .collect(),
            DirectionSampling::MonteCarlo => (0..k)
                .map(|_| {
                    let t = rng.random_range(0.0..2.0 * PI);
                    (t.cos(), t.sin())
                })
                .collect(),
        })
    }
}

/// Scores of one gradient (or feature) map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NdReport {
    pub nd: f64,
    pub robust_nd: f64,
    pub accumulated_nd: Option<f64>,
    pub n_directions: usize,
    pub epsilon: f64,
}

fn map_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return invalid(format!("expected a [B,C,H,W] map, got {shape:?}"));
    }
    let (h, w) = (shape[2], shape[3]);
    if h < 2 || w < 2 {
        return invalid(format!("spatial extent must be at least 2×2, got {h}×{w}"));
    }
    Ok((shape[0] * shape[1], h, w))
}

/// Mean squared directional difference at every location for an explicit set
/// of unit directions.
pub fn local_discontinuity_with(z: &Tensor, directions: &[(f64, f64)]) -> Result<Tensor> {
    let (maps, h, w) = map_dims(z.shape())?;
    if directions.is_empty() {
        return invalid("at least one direction is required");
    }
    let k = directions.len() as f64;
    // The sampling stencil depends only on the map geometry, so it is built
    // once and reused for every map.
    let stencil: Vec<Tap> = (0..h * w)
        .flat_map(|loc| {
            let (i, j) = ((loc / w) as f64, (loc % w) as f64);
            directions.iter().map(move |&(vy, vx)| Tap::new(h, w, i + vy, j + vx))
        })
        .collect();
    let per_loc = directions.len();
    let mut out = vec![0.0; z.len()];
    for (map, dst) in z.data().chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        for (loc, (taps, o)) in stencil.chunks_exact(per_loc).zip(dst.iter_mut()).enumerate() {
            let centre = map[loc];
            let acc: f64 = taps
                .iter()
                .map(|t| {
                    let d = t.sample(map) - centre;
                    d * d
                })
                .sum();
            *o = acc / k;
        }
    }
    debug_assert_eq!(out.len(), maps * h * w);
    Tensor::new(z.shape(), out)
}

/// Precomputed bilinear read with coordinates clamped to the map.
#[derive(Clone, Copy)]
struct Tap {
    idx: [usize; 4],
    fy: f64,
    fx: f64,
}

impl Tap {
    fn new(h: usize, w: usize, y: f64, x: f64) -> Self {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0f, x0f) = (y.floor(), x.floor());
        let (y0, x0) = (y0f as usize, x0f as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        Self {
            idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            fy: y - y0f,
            fx: x - x0f,
        }
    }

    #[inline]
    fn sample(&self, map: &[f64]) -> f64 {
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let top = lerp(map[self.idx[0]], map[self.idx[1]], self.fx);
        let bottom = lerp(map[self.idx[2]], map[self.idx[3]], self.fx);
        lerp(top, bottom, self.fy)
    }
}

/// `D(z)`: expected squared unit-step directional difference per location.
pub fn local_discontinuity<R: Rng + ?Sized>(z: &Tensor, cfg: &NdConfig, rng: &mut R) -> Result<Tensor> {
    let dirs = cfg.direction_set(rng)?;
    local_discontinuity_with(z, &dirs)
}

/// Per-location ratios `D/(x² + ε)` restricted to the configured locations.
fn ratios(x: &Tensor, d: &Tensor, cfg: &NdConfig) -> Result<(Vec<f64>, usize)> {
    let (maps, h, w) = map_dims(x.shape())?;
    let batch = x.shape()[0];
    let interior = cfg.boundary == Boundary::InteriorOnly;
    if interior && (h < 3 || w < 3) {
        return invalid("interior-only scoring needs at least 3×3 maps");
    }
    let mut out = Vec::with_capacity(x.len());
    for m in 0..maps {
        for i in 0..h {
            for j in 0..w {
                if interior && (i == 0 || j == 0 || i == h - 1 || j == w - 1) {
                    continue;
                }
                let idx = (m * h + i) * w + j;
                let v = x.data()[idx];
                out.push(d.data()[idx] / (v * v + cfg.epsilon));
            }
        }
    }
    Ok((out, batch))
}

fn aggregate(values: impl Iterator<Item = f64>, count: usize, batch: usize, agg: Aggregation) -> f64 {
    let total: f64 = values.sum();
    match agg {
        Aggregation::Mean => total / count as f64,
        Aggregation::Sum => total / batch as f64,
    }
}

/// Normalized discontinuity: mean of `D/(x² + ε)` over locations, averaged over the batch.
pub fn nd_score<R: Rng + ?Sized>(x: &Tensor, cfg: &NdConfig, rng: &mut R) -> Result<f64> {
    let d = local_discontinuity(x, cfg, rng)?;
    let (r, _) = ratios(x, &d, cfg)?;
    let n = r.len();
    Ok(r.into_iter().sum::<f64>() / n as f64)
}

/// Robust score: `log(1 + D/(x² + ε))` averaged (or summed) over locations.
pub fn robust_nd<R: Rng + ?Sized>(x: &Tensor, cfg: &NdConfig, rng: &mut R) -> Result<f64> {
    let d = local_discontinuity(x, cfg, rng)?;
    let (r, batch) = ratios(x, &d, cfg)?;
    let n = r.len();
    Ok(aggregate(r.into_iter().map(f64::ln_1p), n, batch, cfg.aggregation))
}

/// Both scores from a single discontinuity evaluation.
pub fn nd_report<R: Rng + ?Sized>(x: &Tensor, cfg: &NdConfig, rng: &mut R) -> Result<NdReport> {
    let d = local_discontinuity(x, cfg, rng)?;
    let (r, batch) = ratios(x, &d, cfg)?;
    let n = r.len();
    let nd = r.iter().sum::<f64>() / n as f64;
    let robust = aggregate(r.iter().map(|v| v.ln_1p()), n, batch, cfg.aggregation);
    if !nd.is_finite() || !robust.is_finite() {
        return Err(Error::Numeric("non-finite discontinuity score".into()));
    }
    Ok(NdReport {
        nd,
        robust_nd: robust,
        accumulated_nd: None,
        n_directions: cfg.directions,
        epsilon: cfg.epsilon,
    })
}

/// Exponential moving average of a gradient map over a fixed diagnostic batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEmaState {
    pub ema: Option<Tensor>,
    pub decay: f64,
}

impl GradEmaState {
    pub fn new(decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return invalid(format!("EMA decay must lie in (0, 1), got {decay}"));
        }
        Ok(Self { ema: None, decay })
    }

    pub fn initialized(&self) -> bool {
        self.ema.is_some()
    }

    /// Folds a new gradient map into the running average.
    pub fn fold(&mut self, new_grad: &Tensor) -> Result<()> {
        match &mut self.ema {
            None => self.ema = Some(Tensor::new(new_grad.shape(), new_grad.data().to_vec())?),
            Some(ema) => {
                if ema.shape() != new_grad.shape() {
                    return invalid(format!(
                        "gradient shape changed from {:?} to {:?}",
                        ema.shape(),
                        new_grad.shape()
                    ));
                }
                let d = self.decay;
                ema.data_mut()
                    .iter_mut()
                    .zip(new_grad.data())
                    .for_each(|(e, g)| *e = d * *e + (1.0 - d) * g);
            }
        }
        Ok(())
    }

    /// ND score of the running average, `None` before the first fold.
    pub fn score<R: Rng + ?Sized>(&self, cfg: &NdConfig, rng: &mut R) -> Result<Option<f64>> {
        self.ema.as_ref().map(|e| nd_score(e, cfg, rng)).transpose()
    }

    /// Folds in a new gradient map and returns the ND score of the average.
    pub fn update<R: Rng + ?Sized>(&mut self, new_grad: &Tensor, cfg: &NdConfig, rng: &mut R) -> Result<f64> {
        self.fold(new_grad)?;
        Ok(self.score(cfg, rng)?.expect("folded above"))
    }
}

/// Averages a `[B,C,H,W]` map over the batch, giving `[1,C,H,W]`.
pub fn batch_mean(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[0] == 0 {
        return invalid(format!("expected a non-empty [B,C,H,W] map, got {s:?}"));
    }
    let per = s[1] * s[2] * s[3];
    let mut out = vec![0.0; per];
    for item in x.data().chunks_exact(per) {
        out.iter_mut().zip(item).for_each(|(o, v)| *o += v);
    }
    let b = s[0] as f64;
    out.iter_mut().for_each(|o| *o /= b);
    Tensor::new(&[1, s[1], s[2], s[3]], out)
}

/// Accumulated ND: updates `state` with `new_grad` and scores the running average.
pub fn accumulated_nd<R: Rng + ?Sized>(
    state: &mut GradEmaState,
    new_grad: &Tensor,
    cfg: &NdConfig,
    rng: &mut R,
) -> Result<f64> {
    state.update(new_grad, cfg, rng)
}

/// Sample Pearson correlation; zero variance yields [`Error::Degenerate`].
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return invalid(format!("pearson: lengths {} and {} differ", x.len(), y.len()));
    }
    if x.len() < 2 {
        return invalid("pearson needs at least two samples");
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 || !(sxx * syy).is_finite() {
        return Err(Error::Degenerate("pearson: zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

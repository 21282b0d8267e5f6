//! Dual-gradient controller for the shared mixing radius `S`.
//!
//! The dual loss is `−S · (ÑD − target)` with the measured score held
//! constant, so its gradient with respect to `S` is `−(ÑD − target)`: the
//! radius grows while gradients are rougher than the target and shrinks once
//! they are smoother.

use crate::error::{invalid, Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualConfig {
    pub initial_radius: f64,
    pub target_nd: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            initial_radius: 1.0,
            target_nd: 0.635,
            lr: 0.003,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            min_radius: 0.0,
            max_radius: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub config: DualConfig,
    pub radius: f64,
    pub m: f64,
    pub v: f64,
    pub step: u64,
}

impl DualState {
    pub fn new(config: DualConfig) -> Result<Self> {
        if !(config.min_radius >= 0.0 && config.min_radius <= config.max_radius) {
            return invalid(format!(
                "radius bounds [{}, {}] are not a non-negative interval",
                config.min_radius, config.max_radius
            ));
        }
        if !(config.lr > 0.0) || !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return invalid("dual optimizer needs lr > 0 and betas in [0, 1)");
        }
        Ok(Self {
            radius: config.initial_radius.clamp(config.min_radius, config.max_radius),
            config,
            m: 0.0,
            v: 0.0,
            step: 0,
        })
    }

    /// Gradient of the dual loss with respect to the radius.
    pub fn gradient(&self, measured_nd: f64) -> f64 {
        -(measured_nd - self.config.target_nd)
    }

    /// One Adam step on the dual loss followed by clamping to the bounds.
    /// A non-finite measurement leaves the state untouched.
    pub fn update(&mut self, measured_nd: f64) -> Result<f64> {
        if !measured_nd.is_finite() {
            log::warn!("skipping dual update: non-finite discontinuity measurement");
            return Err(Error::Numeric("non-finite discontinuity measurement".into()));
        }
        let c = self.config;
        let g = self.gradient(measured_nd);
        self.step += 1;
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
        let mh = self.m / (1.0 - c.beta1.powf(self.step as f64));
        let vh = self.v / (1.0 - c.beta2.powf(self.step as f64));
        self.radius = (self.radius - c.lr * mh / (vh.sqrt() + c.eps)).clamp(c.min_radius, c.max_radius);
        Ok(self.radius)
    }
}

/// Averages per-layer measurements, applies one update and returns the radius
/// every mixing layer uses next.
pub fn shared_radius(measurements: &[f64], state: &mut DualState) -> Result<f64> {
    if measurements.is_empty() {
        return invalid("at least one layer measurement is required");
    }
    let mean = measurements.iter().sum::<f64>() / measurements.len() as f64;
    state.update(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state() -> DualState {
        DualState::new(DualConfig::default()).unwrap()
    }

    #[test]
    fn on_target_measurement_leaves_radius() {
        let mut s = state();
        s.update(0.635).unwrap();
        assert_eq!(s.radius, 1.0);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn rough_gradients_grow_radius_until_clamped() {
        let mut s = state();
        let mut prev = s.radius;
        for _ in 0..2000 {
            let r = s.update(2.0).unwrap();
            assert!(r > prev || r == s.config.max_radius);
            prev = r;
        }
        assert_eq!(s.radius, 4.0);
    }

    #[test]
    fn non_finite_measurement_is_rejected_without_update() {
        let mut s = state();
        let before = s.clone();
        assert!(matches!(s.update(f64::NAN), Err(Error::Numeric(_))));
        assert_eq!(s, before);
    }

    #[test]
    fn regulates_exponential_response() {
        let mut s = state();
        for _ in 0..10_000 {
            let nd = 2.0 * (-s.radius).exp();
            s.update(nd).unwrap();
        }
        let nd = 2.0 * (-s.radius).exp();
        let want = (2.0f64 / 0.635).ln();
        assert!((nd - 0.635).abs() < 0.01 * 0.635, "{nd}");
        assert!((s.radius - want).abs() < 0.02 * want, "{} vs {want}", s.radius);
    }

    #[test]
    fn shared_radius_cases() {
        let mut a = state();
        let mut b = state();
        for m in [0.9, 0.3, 1.4] {
            let ra = shared_radius(&[m], &mut a).unwrap();
            let mut c = b.clone();
            c.update(m).unwrap();
            let rb = shared_radius(&[m, m], &mut b).unwrap();
            assert_eq!(ra, rb);
            assert_eq!(rb, c.radius);
        }
        let mut s = DualState::new(DualConfig {
            target_nd: 0.7,
            ..DualConfig::default()
        })
        .unwrap();
        shared_radius(&[0.2, 1.2], &mut s).unwrap();
        assert_eq!(s.radius, 1.0);
        assert!(shared_radius(&[], &mut s).is_err());
    }

    proptest! {
        #[test]
        fn first_step_sign_and_bounds(measured in -5.0f64..5.0, seq in proptest::collection::vec(-10.0f64..10.0, 1..200)) {
            let mut s = state();
            let before = s.radius;
            s.update(measured).unwrap();
            let delta = s.radius - before;
            let want = measured - 0.635;
            if want.abs() > 1e-12 {
                prop_assert_eq!(delta.signum(), want.signum());
            }
            for m in seq {
                s.update(m).unwrap();
                prop_assert!(s.radius >= 0.0 && s.radius <= 4.0);
            }
        }

        #[test]
        fn regulates_any_decreasing_response(scale in 0.7f64..5.0, rate in 0.3f64..2.0, offset in 0.0f64..0.3) {
            // nd(S) = offset + scale·exp(−rate·S) crosses 0.635 inside [0, 4]
            let nd = |r: f64| offset + scale * (-rate * r).exp();
            prop_assume!(nd(0.0) > 0.635 && nd(4.0) < 0.635);
            let mut s = state();
            for _ in 0..10_000 {
                s.update(nd(s.radius)).unwrap();
            }
            prop_assert!((nd(s.radius) - 0.635).abs() < 0.01);
        }
    }
}

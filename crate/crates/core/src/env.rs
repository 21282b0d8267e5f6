//! Dot-reacher: a point agent with damped velocity dynamics that must reach a
//! goal, observed as stacked 32×32 grayscale frames.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    /// `reward_scale` inside the goal radius, zero elsewhere.
    #[default]
    Sparse,
    /// `−reward_scale · distance`.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub reward_mode: RewardMode,
    pub image_size: usize,
    pub frame_stack: usize,
    pub episode_limit: usize,
    pub goal_radius: f64,
    pub reward_scale: f64,
    /// Velocity retained per step.
    pub damping: f64,
    /// Velocity added per unit of action.
    pub acceleration: f64,
    /// Dot radii in pixels.
    pub agent_radius_px: f64,
    pub goal_radius_px: f64,
    pub agent_intensity: f64,
    pub goal_intensity: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            reward_mode: RewardMode::Sparse,
            image_size: 32,
            frame_stack: 2,
            episode_limit: 100,
            goal_radius: 0.07,
            reward_scale: 0.1,
            damping: 0.8,
            acceleration: 0.03,
            agent_radius_px: 1.5,
            goal_radius_px: 2.0,
            agent_intensity: 1.0,
            goal_intensity: 0.5,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.frame_stack == 0 || self.episode_limit == 0 {
            return invalid("image_size ≥ 8, frame_stack ≥ 1 and episode_limit ≥ 1 are required");
        }
        if !(0.0..1.0).contains(&self.damping) || !(self.acceleration > 0.0) || !(self.goal_radius > 0.0) {
            return invalid("damping in [0, 1), positive acceleration and goal radius are required");
        }
        Ok(())
    }

    /// Largest reachable speed per axis.
    pub fn max_speed(&self) -> f64 {
        self.acceleration / (1.0 - self.damping)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DotReacherState {
    pub agent: [f64; 2],
    pub velocity: [f64; 2],
    pub goal: [f64; 2],
    pub step: usize,
    pub limit: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
}

/// Environment value: state plus the frame history needed for stacking.
#[derive(Debug, Clone, PartialEq)]
pub struct DotReacher {
    pub config: EnvConfig,
    pub state: DotReacherState,
    frames: Vec<Vec<f64>>,
}

impl DotReacher {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let mut env = Self {
            config,
            state: DotReacherState {
                agent: [0.5; 2],
                velocity: [0.0; 2],
                goal: [0.5; 2],
                step: 0,
                limit: config.episode_limit,
            },
            frames: Vec::new(),
        };
        env.reset_frames();
        Ok(env)
    }

    /// Places agent and goal from `seed` and returns the first observation.
    pub fn reset(&mut self, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        let agent = draw();
        let goal = draw();
        self.state = DotReacherState {
            agent,
            velocity: [0.0; 2],
            goal,
            step: 0,
            limit: self.config.episode_limit,
        };
        self.reset_frames();
        self.observation()
    }

    /// Replaces the state directly, clearing the frame history.
    pub fn set_state(&mut self, state: DotReacherState) -> Tensor {
        self.state = state;
        self.reset_frames();
        self.observation()
    }

    /// Restores a state together with the stacked frames it was observed
    /// with, as returned by [`DotReacher::observation`].
    pub fn restore(&mut self, state: DotReacherState, observation: &Tensor) -> Result<()> {
        let n = self.config.image_size;
        if observation.shape() != [self.config.frame_stack, n, n] {
            return invalid(format!(
                "observation shape {:?} does not match the environment",
                observation.shape()
            ));
        }
        self.state = state;
        self.frames = observation.data().chunks(n * n).map(<[f64]>::to_vec).collect();
        Ok(())
    }

    fn reset_frames(&mut self) {
        let f = render(&self.config, &self.state);
        self.frames = vec![f; self.config.frame_stack];
    }

    pub fn step(&mut self, action: &[f64]) -> Result<(Tensor, StepOutcome)> {
        if action.len() != 2 {
            return invalid(format!("dot-reacher actions are 2-vectors, got {}", action.len()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return invalid("non-finite action");
        }
        if action.iter().any(|a| a.abs() > 1.0) {
            log::debug!("clamping out-of-box action {action:?}");
        }
        let c = self.config;
        let s = &mut self.state;
        for k in 0..2 {
            let a = action[k].clamp(-1.0, 1.0);
            s.velocity[k] = c.damping * s.velocity[k] + c.acceleration * a;
            let p = s.agent[k] + s.velocity[k];
            if !(0.0..=1.0).contains(&p) {
                s.velocity[k] = 0.0;
            }
            s.agent[k] = p.clamp(0.0, 1.0);
        }
        s.step += 1;
        let reward = self.reward();
        let done = self.state.step >= self.state.limit;
        self.frames.remove(0);
        self.frames.push(render(&self.config, &self.state));
        Ok((self.observation(), StepOutcome { reward, done }))
    }

    pub fn goal_distance(&self) -> f64 {
        let s = &self.state;
        (s.agent[0] - s.goal[0]).hypot(s.agent[1] - s.goal[1])
    }

    fn reward(&self) -> f64 {
        let d = self.goal_distance();
        match self.config.reward_mode {
            RewardMode::Sparse if d < self.config.goal_radius => self.config.reward_scale,
            RewardMode::Sparse => 0.0,
            RewardMode::Dense => -self.config.reward_scale * d,
        }
    }

    /// Stacked frames, oldest first, shape `[F, H, W]`.
    pub fn observation(&self) -> Tensor {
        let n = self.config.image_size;
        let data = self.frames.iter().flatten().copied().collect();
        Tensor::new(&[self.config.frame_stack, n, n], data).expect("frame sizes are fixed")
    }

    /// `(x, y, vx, vy, gx, gy)`.
    pub fn proprio_state(&self) -> [f64; 6] {
        let s = &self.state;
        [
            s.agent[0],
            s.agent[1],
            s.velocity[0],
            s.velocity[1],
            s.goal[0],
            s.goal[1],
        ]
    }
}

/// Pixel column/row of a unit-square coordinate; pixel `k` covers `[k, k+1)/n`.
pub fn to_pixel(coord: f64, size: usize) -> f64 {
    coord * size as f64 - 0.5
}

/// Renders one frame, quantized to 8-bit levels. `x` runs along columns and
/// `y` along rows. Dots are anti-aliased discs with a one-pixel soft edge.
pub fn render(config: &EnvConfig, state: &DotReacherState) -> Vec<f64> {
    let n = config.image_size;
    let mut frame = vec![0.0f64; n * n];
    let mut draw = |centre: [f64; 2], radius: f64, intensity: f64| {
        let (cx, cy) = (to_pixel(centre[0], n), to_pixel(centre[1], n));
        let reach = radius + 1.0;
        let rows = (cy - reach).floor().max(0.0) as usize..=((cy + reach).ceil() as usize).min(n - 1);
        for i in rows {
            let cols = (cx - reach).floor().max(0.0) as usize..=((cx + reach).ceil() as usize).min(n - 1);
            for j in cols {
                let d = (i as f64 - cy).hypot(j as f64 - cx);
                let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
                let v = &mut frame[i * n + j];
                *v = (*v).max(cover * intensity);
            }
        }
    };
    draw(state.goal, config.goal_radius_px, config.goal_intensity);
    draw(state.agent, config.agent_radius_px, config.agent_intensity);
    frame.iter_mut().for_each(|v| *v = (*v * 255.0).round() / 255.0);
    frame
}

use super::replay::Batch;
use crate::dual::{shared_radius, DualConfig, DualState};
use crate::error::{invalid, Error, Result};
use crate::lix::{random_shift_aug, ShiftGranularity};
use crate::metrics::{batch_mean, robust_nd, GradEmaState, NdConfig};
use crate::nn::{
    bind, build_mlp, collect_grads, mlp_forward, polyak_update, Adam, AdamConfig, Encoder, EncoderConfig, LixPlacement,
    Mixing, Mlp,
};
use crate::tensor::{Grads, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub encoder: EncoderConfig,
    pub hidden_dim: usize,
    pub action_dim: usize,
    pub proprio_dim: usize,
    pub use_lix: bool,
    /// Adapt the radius by dual descent; otherwise it stays at
    /// `dual.initial_radius`.
    pub adaptive_s: bool,
    pub shift_granularity: ShiftGranularity,
    pub use_shift_aug: bool,
    pub aug_pad: usize,
    pub freeze_encoder: bool,
    pub proprioceptive: bool,
    pub reward_normalize: bool,
    pub n_step: usize,
    pub gamma: f64,
    /// Target-network retention per update.
    pub polyak: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub dual: DualConfig,
    pub nd: NdConfig,
    pub grad_ema_decay: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::desk_default(),
            hidden_dim: 256,
            action_dim: 2,
            proprio_dim: 6,
            use_lix: false,
            adaptive_s: true,
            shift_granularity: ShiftGranularity::PerLocation,
            use_shift_aug: false,
            aug_pad: 2,
            freeze_encoder: false,
            proprioceptive: false,
            reward_normalize: false,
            n_step: 3,
            gamma: 0.99,
            polyak: 0.99,
            lr: 1e-4,
            batch_size: 256,
            dual: DualConfig::default(),
            nd: NdConfig::default(),
            grad_ema_decay: 0.9,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.proprioceptive && (self.use_lix || self.use_shift_aug) {
            return Err(Error::Usage {
                field: "agent.proprioceptive".into(),
                message: "proprioceptive agents take no pixel regularizers (use_lix, use_shift_aug)".into(),
            });
        }
        if self.use_lix && self.encoder.lix_placement == LixPlacement::None {
            return Err(Error::Usage {
                field: "agent.encoder.lix_placement".into(),
                message: "use_lix needs at least one mixing layer".into(),
            });
        }
        if self.n_step == 0 || self.batch_size == 0 || self.hidden_dim == 0 || self.action_dim == 0 {
            return invalid("n_step, batch_size, hidden_dim and action_dim must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.polyak) || !(self.lr > 0.0) {
            return invalid("gamma and polyak must lie in [0, 1] and lr must be positive");
        }
        self.encoder.layer_shapes()?;
        Ok(())
    }

    fn feature_dim(&self) -> usize {
        if self.proprioceptive {
            self.proprio_dim
        } else {
            self.encoder.trunk_dim
        }
    }
}

/// Where the bootstrap action of a TD target comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetPolicy {
    /// The action recorded in the data (SARSA).
    Dataset,
    /// The current actor at the bootstrap state.
    Actor,
}

/// Welford running mean and variance.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RunningStats {
    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Population standard deviation, floored at `1e-6`.
    pub fn std(&self) -> f64 {
        let var = if self.count > 0 {
            self.m2 / self.count as f64
        } else {
            0.0
        };
        var.sqrt().max(1e-6)
    }
}

/// Independent random streams owned by an agent. Keeping them apart means a
/// zero mixing radius leaves every other draw, and so the whole trajectory,
/// unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRngs {
    pub aug: ChaCha8Rng,
    pub lix: ChaCha8Rng,
    pub diag: ChaCha8Rng,
}

impl AgentRngs {
    pub fn from_seed(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            aug: stream(1),
            lix: stream(2),
            diag: stream(3),
        }
    }
}

/// Summary of one critic step.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticStats {
    pub td_loss: f64,
    pub q: Vec<f64>,
    pub target: Vec<f64>,
    /// Mean robust ND of the gradients at the mixing-layer outputs.
    pub nd_measurement: Option<f64>,
    pub radius: f64,
}

/// Critic-side quantities evaluated on a fixed batch without updating anything.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticProbe {
    pub q: Vec<f64>,
    pub target: Vec<f64>,
    /// Per-sample squared TD errors.
    pub sq_errors: Vec<f64>,
    /// TD-loss gradient at the final convolutional activation.
    pub feature_grad: Option<Tensor>,
}

/// Networks, optimizers and controller state of one actor-critic agent.
#[derive(Debug, Clone)]
pub struct AgentBundle {
    pub config: AgentConfig,
    pub encoder: Option<Encoder>,
    pub target_encoder: Option<Encoder>,
    pub critic: Mlp,
    pub target_critic: Mlp,
    pub actor: Mlp,
    pub encoder_opt: Option<Adam>,
    pub critic_opt: Adam,
    pub actor_opt: Adam,
    pub dual: DualState,
    pub reward_stats: RunningStats,
    pub grad_ema: GradEmaState,
    pub rngs: AgentRngs,
}

struct Encoded {
    features: Var,
    lix_outputs: Vec<Var>,
    conv_features: Option<Var>,
}

impl AgentBundle {
    pub fn new(config: AgentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = if config.proprioceptive {
            None
        } else {
            Some(Encoder::build(config.encoder.clone(), &mut rng)?)
        };
        let f = config.feature_dim();
        let h = config.hidden_dim;
        let critic = build_mlp(&[f + config.action_dim, h, h, 1], &mut rng)?;
        let actor = build_mlp(&[f, h, h, config.action_dim], &mut rng)?;
        let adam = AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        };
        Ok(Self {
            encoder_opt: encoder.as_ref().map(|e| Adam::new(adam, e)),
            critic_opt: Adam::new(adam, &critic),
            actor_opt: Adam::new(adam, &actor),
            target_encoder: encoder.clone(),
            target_critic: critic.clone(),
            dual: DualState::new(config.dual)?,
            grad_ema: GradEmaState::new(config.grad_ema_decay)?,
            reward_stats: RunningStats::default(),
            rngs: AgentRngs::from_seed(seed),
            encoder,
            critic,
            actor,
            config,
        })
    }

    /// Current mixing radius (zero when mixing is disabled).
    pub fn radius(&self) -> f64 {
        if self.config.use_lix {
            self.dual.radius
        } else {
            0.0
        }
    }

    fn augment(&mut self, obs: &Tensor) -> Result<Tensor> {
        if self.config.use_shift_aug {
            random_shift_aug(obs, self.config.aug_pad, &mut self.rngs.aug)
        } else {
            Ok(obs.clone())
        }
    }

    /// Encodes observations (or passes proprio through).
    fn encode(
        &self,
        tape: &mut Tape,
        encoder: Option<&Encoder>,
        enc_vars: &[Var],
        obs: &Tensor,
        proprio: Option<&Tensor>,
        mixing: &mut Mixing<'_>,
    ) -> Result<Encoded> {
        match encoder {
            None => {
                let p =
                    proprio.ok_or_else(|| Error::InvalidArgument("proprioceptive agent needs proprio input".into()))?;
                if p.shape().len() != 2 || p.shape()[1] != self.config.proprio_dim {
                    return invalid(format!("proprio shape {:?}", p.shape()));
                }
                Ok(Encoded {
                    features: tape.constant(p),
                    lix_outputs: Vec::new(),
                    conv_features: None,
                })
            }
            Some(enc) => {
                let x = tape.constant(obs);
                let out = enc.forward(tape, enc_vars, x, mixing)?;
                Ok(Encoded {
                    features: out.trunk,
                    lix_outputs: out.lix_outputs,
                    conv_features: Some(out.conv_features),
                })
            }
        }
    }

    fn q_value(tape: &mut Tape, critic: &Mlp, vars: &[Var], features: Var, action: Var) -> Result<Var> {
        let x = tape.concat_cols(features, action)?;
        mlp_forward(tape, critic, vars, x)
    }

    fn policy(tape: &mut Tape, actor: &Mlp, vars: &[Var], features: Var) -> Result<Var> {
        let a = mlp_forward(tape, actor, vars, features)?;
        Ok(tape.tanh(a))
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let b = batch.len();
        let a = self.config.action_dim;
        let ok = batch.action.shape() == [b, a]
            && batch.next_action.shape() == [b, a]
            && batch.obs.shape().first() == Some(&b)
            && batch.next_obs.shape() == batch.obs.shape()
            && batch.discount.len() == b
            && batch.done.len() == b;
        if !ok || b == 0 {
            return invalid("batch fields disagree in size or action dimension");
        }
        if self.config.proprioceptive && batch.proprio.is_none() {
            return invalid("proprioceptive agent needs batches with proprio");
        }
        Ok(())
    }

    /// Rewards after optional normalization by the running standard deviation.
    fn scaled_rewards(&mut self, batch: &Batch, track: bool) -> Vec<f64> {
        if !self.config.reward_normalize {
            return batch.reward.clone();
        }
        if track {
            batch.reward.iter().for_each(|&r| self.reward_stats.update(r));
        }
        let s = self.reward_stats.std();
        batch.reward.iter().map(|r| r / s).collect()
    }

    /// `y = R + γⁿ·(1 − done)·Q̂′(s′, a′)`, evaluated with target networks and
    /// no mixing.
    pub fn td_targets(&mut self, batch: &Batch, rewards: &[f64], policy: TargetPolicy) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        if rewards.len() != batch.len() {
            return invalid("reward count does not match the batch");
        }
        let next_obs = self.augment(&batch.next_obs)?;
        let mut tape = Tape::new();
        let enc_vars = match &self.target_encoder {
            Some(e) => bind(&mut tape, e, false),
            None => Vec::new(),
        };
        let enc = self.encode(
            &mut tape,
            self.target_encoder.as_ref(),
            &enc_vars,
            &next_obs,
            batch.next_proprio.as_ref(),
            &mut Mixing::Off,
        )?;
        let action = match policy {
            TargetPolicy::Dataset => tape.constant(&batch.next_action),
            TargetPolicy::Actor => {
                let av = bind(&mut tape, &self.actor, false);
                Self::policy(&mut tape, &self.actor, &av, enc.features)?
            }
        };
        let cv = bind(&mut tape, &self.target_critic, false);
        let q = Self::q_value(&mut tape, &self.target_critic, &cv, enc.features, action)?;
        let qv = tape.value(q);
        Ok((0..batch.len())
            .map(|i| {
                let boot = if batch.done[i] { 0.0 } else { batch.discount[i] * qv[i] };
                rewards[i] + boot
            })
            .collect())
    }

    /// One gradient step on the squared TD error for encoder and critic, one
    /// dual step on the radius and one target-network update.
    pub fn critic_update(&mut self, batch: &Batch, policy: TargetPolicy) -> Result<CriticStats> {
        self.check_batch(batch)?;
        let rewards = self.scaled_rewards(batch, true);
        let y = self.td_targets(batch, &rewards, policy)?;
        let obs = self.augment(&batch.obs)?;
        let radius = self.radius();
        let trainable = !self.config.freeze_encoder;

        let mut tape = Tape::new();
        let enc_vars = match &self.encoder {
            Some(e) => bind(&mut tape, e, trainable),
            None => Vec::new(),
        };
        let granularity = self.config.shift_granularity;
        let use_lix = self.config.use_lix;
        let encoder = self.encoder.take();
        let mut lix_rng = self.rngs.lix.clone();
        let encoded = {
            let mut mixing = if use_lix {
                Mixing::Sample {
                    radius,
                    granularity,
                    rng: &mut lix_rng,
                }
            } else {
                Mixing::Off
            };
            self.encode(
                &mut tape,
                encoder.as_ref(),
                &enc_vars,
                &obs,
                batch.proprio.as_ref(),
                &mut mixing,
            )
        };
        self.encoder = encoder;
        self.rngs.lix = lix_rng;
        let enc = encoded?;

        let cv = bind(&mut tape, &self.critic, true);
        let action = tape.constant(&batch.action);
        let q = Self::q_value(&mut tape, &self.critic, &cv, enc.features, action)?;
        let yv = tape.constant_from(&[batch.len(), 1], y.clone())?;
        let diff = tape.sub(q, yv)?;
        let sq = tape.square(diff);
        let loss = tape.mean_all(sq);
        let td_loss = tape.scalar(loss)?;
        if !td_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite TD loss {td_loss}")));
        }
        let grads = tape.backward(loss)?;

        let nd_measurement = if use_lix && !enc.lix_outputs.is_empty() {
            Some(self.mixing_nd(&tape, &grads, &enc.lix_outputs)?)
        } else {
            None
        };

        // Per-position running average of the feature gradient across
        // consecutive training batches.
        if let Some(cf) = enc.conv_features {
            let g = Tensor::new(tape.shape(cf), grads.get_or_zeros(cf, tape.value(cf).len()))?;
            self.grad_ema.fold(&batch_mean(&g)?)?;
        }

        collect_grads(&grads, &cv, &mut self.critic)?;
        self.critic_opt.step(&mut self.critic)?;
        if trainable {
            if let (Some(e), Some(opt)) = (self.encoder.as_mut(), self.encoder_opt.as_mut()) {
                collect_grads(&grads, &enc_vars, e)?;
                opt.step(e)?;
            }
        }
        if let (Some(nd), true) = (nd_measurement, self.config.adaptive_s) {
            shared_radius(&[nd], &mut self.dual)?;
        }
        self.update_targets()?;
        Ok(CriticStats {
            td_loss,
            q: tape.value(q).to_vec(),
            target: y,
            nd_measurement,
            radius,
        })
    }

    /// Mean robust ND over the gradients reaching each mixing-layer output.
    fn mixing_nd(&mut self, tape: &Tape, grads: &Grads, outputs: &[Var]) -> Result<f64> {
        let mut scores = Vec::with_capacity(outputs.len());
        for &v in outputs {
            let g = Tensor::new(tape.shape(v), grads.get_or_zeros(v, tape.value(v).len()))?;
            scores.push(robust_nd(&g, &self.config.nd, &mut self.rngs.diag)?);
        }
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }

    pub fn update_targets(&mut self) -> Result<()> {
        let rho = self.config.polyak;
        polyak_update(&mut self.target_critic, &self.critic, rho)?;
        if self.config.freeze_encoder {
            return Ok(());
        }
        if let (Some(t), Some(e)) = (self.target_encoder.as_mut(), self.encoder.as_ref()) {
            polyak_update(t, e, rho)?;
        }
        Ok(())
    }

    /// Evaluates Q, targets, squared errors and the feature gradient on a
    /// fixed batch. Mixing uses the diagnostic stream; no parameter, statistic
    /// or training stream changes.
    pub fn probe_critic(&mut self, batch: &Batch, policy: TargetPolicy) -> Result<CriticProbe> {
        self.check_batch(batch)?;
        let rewards = self.scaled_rewards(batch, false);
        let saved_aug = self.rngs.aug.clone();
        let y = self.td_targets(batch, &rewards, policy);
        self.rngs.aug = saved_aug;
        let y = y?;
        let mut tape = Tape::new();
        // Parameters are bound as leaves only so that gradients reach the
        // intermediate activation; nothing is written back.
        let enc_vars = match &self.encoder {
            Some(e) => bind(&mut tape, e, true),
            None => Vec::new(),
        };
        let obs = batch.obs.clone();
        let radius = self.radius();
        let granularity = self.config.shift_granularity;
        let mut diag = self.rngs.diag.clone();
        let enc = {
            let mut mixing = if self.config.use_lix {
                Mixing::Sample {
                    radius,
                    granularity,
                    rng: &mut diag,
                }
            } else {
                Mixing::Off
            };
            self.encode(
                &mut tape,
                self.encoder.as_ref(),
                &enc_vars,
                &obs,
                batch.proprio.as_ref(),
                &mut mixing,
            )?
        };
        self.rngs.diag = diag;
        let cv = bind(&mut tape, &self.critic, false);
        let action = tape.constant(&batch.action);
        let q = Self::q_value(&mut tape, &self.critic, &cv, enc.features, action)?;
        let feature_grad = match enc.conv_features {
            Some(cf) => {
                let yv = tape.constant_from(&[batch.len(), 1], y.clone())?;
                let diff = tape.sub(q, yv)?;
                let sq = tape.square(diff);
                let loss = tape.mean_all(sq);
                let grads = tape.backward(loss)?;
                Some(Tensor::new(
                    tape.shape(cf),
                    grads.get_or_zeros(cf, tape.value(cf).len()),
                )?)
            }
            None => None,
        };
        let qv = tape.value(q).to_vec();
        let sq_errors = qv.iter().zip(&y).map(|(q, y)| (q - y) * (q - y)).collect();
        Ok(CriticProbe {
            q: qv,
            target: y,
            sq_errors,
            feature_grad,
        })
    }

    /// One actor step ascending `Q(s, π(s))` with critic and encoder held fixed.
    /// Returns `−mean Q`.
    pub fn actor_update(&mut self, batch: &Batch) -> Result<f64> {
        self.check_batch(batch)?;
        let obs = self.augment(&batch.obs)?;
        let mut tape = Tape::new();
        let enc_vars = match &self.encoder {
            Some(e) => bind(&mut tape, e, false),
            None => Vec::new(),
        };
        let enc = self.encode(
            &mut tape,
            self.encoder.as_ref(),
            &enc_vars,
            &obs,
            batch.proprio.as_ref(),
            &mut Mixing::Off,
        )?;
        let features = tape.detach(enc.features);
        let av = bind(&mut tape, &self.actor, true);
        let action = Self::policy(&mut tape, &self.actor, &av, features)?;
        let cv = bind(&mut tape, &self.critic, false);
        let q = Self::q_value(&mut tape, &self.critic, &cv, features, action)?;
        let mean_q = tape.mean_all(q);
        let loss = tape.scalar_mul(mean_q, -1.0);
        let value = tape.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite policy loss {value}")));
        }
        let grads = tape.backward(loss)?;
        collect_grads(&grads, &av, &mut self.actor)?;
        self.actor_opt.step(&mut self.actor)?;
        Ok(value)
    }

    /// Final convolutional activation of `obs` with mixing off.
    pub fn conv_features(&self, obs: &Tensor) -> Result<Tensor> {
        let enc = self
            .encoder
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("proprioceptive agent has no encoder".into()))?;
        let mut tape = Tape::new();
        let vars = bind(&mut tape, enc, false);
        let x = tape.constant(obs);
        let out = enc.forward(&mut tape, &vars, x, &mut Mixing::Off)?;
        Ok(tape.to_tensor(out.conv_features))
    }

    /// Mean squared error of `Q(trunk(features), action)` against `targets`.
    pub fn critic_loss_on_features(&self, features: &Tensor, action: &Tensor, targets: &[f64]) -> Result<f64> {
        let enc = self
            .encoder
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("proprioceptive agent has no encoder".into()))?;
        let b = features.shape().first().copied().unwrap_or(0);
        if targets.len() != b || action.shape() != [b, self.config.action_dim] {
            return invalid("features, actions and targets disagree in batch size");
        }
        let mut tape = Tape::new();
        let vars = bind(&mut tape, enc, false);
        let z = tape.constant(features);
        let trunk = enc.trunk(&mut tape, &vars, z)?;
        let cv = bind(&mut tape, &self.critic, false);
        let a = tape.constant(action);
        let q = Self::q_value(&mut tape, &self.critic, &cv, trunk, a)?;
        let qv = tape.value(q);
        Ok(qv.iter().zip(targets).map(|(q, y)| (q - y) * (q - y)).sum::<f64>() / b as f64)
    }

    /// Deterministic actions for a batch of observations.
    pub fn act_batch(&self, obs: &Tensor, proprio: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let enc_vars = match &self.encoder {
            Some(e) => bind(&mut tape, e, false),
            None => Vec::new(),
        };
        let enc = self.encode(
            &mut tape,
            self.encoder.as_ref(),
            &enc_vars,
            obs,
            proprio,
            &mut Mixing::Off,
        )?;
        let av = bind(&mut tape, &self.actor, false);
        let a = Self::policy(&mut tape, &self.actor, &av, enc.features)?;
        Ok(tape.to_tensor(a))
    }

    /// Action for one observation `[C,H,W]` plus clipped Gaussian exploration noise.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &Tensor,
        proprio: Option<&[f64]>,
        noise_std: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut shape = vec![1];
        shape.extend_from_slice(obs.shape());
        let o = obs.reshape(&shape)?;
        let p = match proprio {
            Some(p) => Some(Tensor::new(&[1, p.len()], p.to_vec())?),
            None => None,
        };
        let a = self.act_batch(&o, p.as_ref())?;
        Ok(a.data()
            .iter()
            .map(|&m| {
                let n: f64 = if noise_std > 0.0 {
                    rng.sample(StandardNormal)
                } else {
                    0.0
                };
                (m + noise_std * n).clamp(-1.0, 1.0)
            })
            .collect())
    }
}

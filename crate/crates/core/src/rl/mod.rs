//! TD learning: replay with n-step returns, critic and actor updates, SARSA
//! policy evaluation on fixed data and policy improvement.

mod agent;
mod replay;

pub use agent::{AgentBundle, AgentConfig, AgentRngs, CriticProbe, CriticStats, RunningStats, TargetPolicy};
pub use replay::{Batch, ReplayBuffer, ReplaySnapshot, Transition};

use crate::env::{DotReacher, EnvConfig};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `R_t = Σ_{k≥0} γᵏ r_{t+k}` for every step of every episode, computed backward.
pub fn monte_carlo_returns(episodes: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
    episodes
        .iter()
        .map(|rewards| {
            let mut out = vec![0.0; rewards.len()];
            let mut acc = 0.0;
            for (t, r) in rewards.iter().enumerate().rev() {
                acc = r + gamma * acc;
                out[t] = acc;
            }
            out
        })
        .collect()
}

/// Runs `steps` SARSA critic updates on `data`, bootstrapping from the
/// recorded next action. `on_step` sees the agent after each update.
pub fn sarsa_policy_evaluation<R, F>(
    agent: &mut AgentBundle,
    data: &ReplayBuffer,
    steps: usize,
    rng: &mut R,
    mut on_step: F,
) -> Result<()>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &mut AgentBundle, &CriticStats) -> Result<()>,
{
    let n = agent.config.n_step;
    if data.valid_starts(n).is_empty() {
        return invalid("dataset has no transition with a recorded next action");
    }
    for step in 1..=steps {
        let batch = data.sample_nstep(agent.config.batch_size, n, agent.config.gamma, rng)?;
        let stats = agent.critic_update(&batch, TargetPolicy::Dataset)?;
        on_step(step, agent, &stats)?;
    }
    Ok(())
}

/// Runs `steps` actor updates against the (fixed) critic on dataset states.
pub fn policy_improvement<R, F>(
    agent: &mut AgentBundle,
    data: &ReplayBuffer,
    steps: usize,
    rng: &mut R,
    mut on_step: F,
) -> Result<()>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &mut AgentBundle, f64) -> Result<()>,
{
    for step in 1..=steps {
        let batch = data.sample_nstep(agent.config.batch_size, 1, agent.config.gamma, rng)?;
        let loss = agent.actor_update(&batch)?;
        on_step(step, agent, loss)?;
    }
    Ok(())
}

/// Collects `transitions` steps of a uniformly random policy. Episode `k`
/// resets with seed `seed·1_000_003 + k`.
pub fn collect_random(
    env_config: EnvConfig,
    transitions: usize,
    seed: u64,
    with_proprio: bool,
) -> Result<ReplayBuffer> {
    let mut env = DotReacher::new(env_config)?;
    let n = env_config.image_size;
    let mut buf = ReplayBuffer::new(transitions.max(1), &[env_config.frame_stack, n, n])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episode_seed = |k: u64| seed.wrapping_mul(1_000_003).wrapping_add(k);
    let mut episode = 0u64;
    let mut obs = env.reset(episode_seed(episode));
    for _ in 0..transitions {
        let action = vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        let proprio = env.proprio_state().to_vec();
        let (next_obs, out) = env.step(&action)?;
        buf.push(Transition {
            obs,
            action,
            reward: out.reward,
            next_obs: next_obs.clone(),
            done: out.done,
            proprio: with_proprio.then_some(proprio),
            next_proprio: with_proprio.then(|| env.proprio_state().to_vec()),
        })?;
        obs = if out.done {
            episode += 1;
            env.reset(episode_seed(episode))
        } else {
            next_obs
        };
    }
    Ok(buf)
}

/// Undiscounted returns of the deterministic policy over `episodes` episodes
/// reset with seeds `seed, seed+1, …`.
pub fn evaluate_policy(agent: &AgentBundle, env_config: EnvConfig, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    let mut env = DotReacher::new(env_config)?;
    let mut returns = Vec::with_capacity(episodes);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    for k in 0..episodes as u64 {
        let mut obs = env.reset(seed.wrapping_add(k));
        let mut total = 0.0;
        loop {
            let p = env.proprio_state();
            let a = agent.act(&obs, agent.config.proprioceptive.then_some(&p[..]), 0.0, &mut unused)?;
            let (next, out) = env.step(&a)?;
            total += out.reward;
            obs = next;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(returns)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

/// Stacks per-sample proprio vectors into `[B, D]`.
pub fn proprio_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    Tensor::new(&[rows.len(), d], rows.concat())
}

//! Per-seed experiment drivers and the multi-seed orchestrator.

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, Mode};
use super::metrics::{read_metrics_file, MetricsRow, MetricsWriter};
use crate::env::DotReacher;
use crate::error::{Error, Result};
use crate::metrics::{batch_mean, checkerboard_probe, jacobian_frobenius, nd_score, pearson, robust_nd};
use crate::rl::{
    collect_random, evaluate_policy, mean_std, policy_improvement, sarsa_policy_evaluation, AgentBundle, Batch,
    ReplayBuffer, TargetPolicy, Transition,
};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PROBE_FILE: &str = "probe.json";

/// Streams derived from the run seed, apart from the agent's own.
const STREAM_DIAG_BATCH: u64 = 4;
const STREAM_SAMPLER: u64 = 5;
const STREAM_EXPLORE: u64 = 6;
const STREAM_PROBE: u64 = 7;
/// Evaluation episodes reset from seeds far from the data-collection ones.
const EVAL_SEED_OFFSET: u64 = 1 << 40;

pub fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Stopped,
    Failed,
}

/// Outcome of one seed, written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub steps: u64,
    /// Undiscounted returns of the evaluation episodes.
    pub returns: Vec<f64>,
    pub return_mean: Option<f64>,
    pub return_std: Option<f64>,
    pub final_radius: Option<f64>,
}

impl SeedSummary {
    fn new(seed: u64, status: RunStatus, steps: u64, returns: Vec<f64>, radius: Option<f64>) -> Self {
        let (m, s) = mean_std(&returns);
        Self {
            seed,
            status,
            error: None,
            steps,
            return_mean: m.is_finite().then_some(m),
            return_std: s.is_finite().then_some(s),
            returns,
            final_radius: radius,
        }
    }

    fn failed(seed: u64, error: String) -> Self {
        Self {
            seed,
            status: RunStatus::Failed,
            error: Some(error),
            steps: 0,
            returns: Vec::new(),
            return_mean: None,
            return_std: None,
            final_radius: None,
        }
    }
}

/// Top-level `summary.json` of a multi-seed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub seeds: Vec<SeedSummary>,
    /// Mean and standard deviation of the per-seed mean returns.
    pub return_mean: Option<f64>,
    pub return_std: Option<f64>,
    pub failed: usize,
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.run.output_dir.join(&cfg.run.name).join(format!("seed-{seed}"))
}

/// Replaces `{seed}` in a configured path.
pub fn seeded_path(path: &Path, seed: u64) -> PathBuf {
    PathBuf::from(path.to_string_lossy().replace("{seed}", &seed.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Runs every configured seed. A failing seed is recorded in its summary and
/// does not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig, resume: bool) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let root = cfg.run.output_dir.join(&cfg.run.name);
    std::fs::create_dir_all(&root)?;
    write_json(&root.join(CONFIG_FILE), cfg)?;
    let mut seeds = Vec::new();
    for &seed in &cfg.run.seeds {
        let dir = seed_dir(cfg, seed);
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run_seed(cfg, seed, &dir, resume)));
        let summary = match outcome {
            Ok(Ok(s)) => s,
            Ok(Err(e)) => {
                log::error!("seed {seed} failed: {e}");
                SeedSummary::failed(seed, e.to_string())
            }
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                log::error!("seed {seed} panicked: {msg}");
                SeedSummary::failed(seed, msg)
            }
        };
        if std::fs::create_dir_all(&dir).is_ok() {
            write_json(&dir.join(SUMMARY_FILE), &summary)?;
        }
        seeds.push(summary);
    }
    let means: Vec<f64> = seeds.iter().filter_map(|s| s.return_mean).collect();
    let (m, s) = mean_std(&means);
    let summary = ExperimentSummary {
        name: cfg.run.name.clone(),
        failed: seeds.iter().filter(|s| s.status == RunStatus::Failed).count(),
        seeds,
        return_mean: m.is_finite().then_some(m),
        return_std: s.is_finite().then_some(s),
    };
    write_json(&root.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Runs one seed into `dir`, writing config, metrics, checkpoint and summary.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path, resume: bool) -> Result<SeedSummary> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    let summary = match cfg.run.mode {
        Mode::OfflineEval => run_offline(cfg, seed, dir, resume)?,
        Mode::Online => run_online(cfg, seed, dir, resume)?,
        Mode::Probe => {
            run_probe(cfg, seed, dir)?;
            SeedSummary::new(seed, RunStatus::Ok, 0, Vec::new(), None)
        }
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Builds the agent, optionally seeding its encoder from another checkpoint.
pub fn initial_agent(cfg: &ExperimentConfig, seed: u64) -> Result<AgentBundle> {
    let mut agent = AgentBundle::new(cfg.agent.clone(), seed)?;
    if let Some(path) = &cfg.run.encoder_from {
        let path = seeded_path(path, seed);
        let donor = Checkpoint::load(&path)?;
        let (Some(e), Some(t)) = (agent.encoder.as_mut(), agent.target_encoder.as_mut()) else {
            return Err(Error::Usage {
                field: "run.encoder_from".into(),
                message: "a proprioceptive agent has no encoder to initialise".into(),
            });
        };
        donor.load_module("agent/encoder", e)?;
        *t = e.clone();
        log::info!("encoder initialised from {}", path.display());
    }
    Ok(agent)
}

/// Progress saved alongside the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Progress {
    mode: Mode,
    step: u64,
    rows: usize,
    done: bool,
    returns: Vec<f64>,
    // Online only.
    episode: u64,
    episode_return: f64,
    pending_returns: Vec<f64>,
    env_state: Option<crate::env::DotReacherState>,
}

fn save_progress(
    dir: &Path,
    agent: &AgentBundle,
    progress: &Progress,
    extra: impl FnOnce(&mut Checkpoint),
) -> Result<()> {
    let mut c = Checkpoint::new();
    c.put_agent(agent);
    c.put_json("run/progress", progress);
    extra(&mut c);
    c.save(&dir.join(CHECKPOINT_FILE))
}

/// Rows already on disk up to the checkpointed count, rewritten so the file
/// ends exactly where the checkpoint does.
fn reopen_metrics(dir: &Path, keep: Option<usize>) -> Result<(MetricsWriter<BufWriter<File>>, usize)> {
    let path = dir.join(METRICS_FILE);
    let kept = match keep {
        Some(k) => {
            let rows = read_metrics_file(&path)?;
            if rows.len() < k {
                return Err(Error::Integrity(format!(
                    "metrics file has {} rows but the checkpoint recorded {k}",
                    rows.len()
                )));
            }
            rows[..k].to_vec()
        }
        None => Vec::new(),
    };
    let mut w = MetricsWriter::new(BufWriter::new(File::create(&path)?))?;
    for r in &kept {
        w.write(r)?;
    }
    Ok((w, kept.len()))
}

fn load_resume(dir: &Path, resume: bool, mode: Mode) -> Result<Option<(Checkpoint, Progress)>> {
    let path = dir.join(CHECKPOINT_FILE);
    if !resume || !path.exists() {
        return Ok(None);
    }
    let c = Checkpoint::load(&path)?;
    let p: Progress = c.json("run/progress")?;
    if p.mode != mode {
        return Err(Error::Usage {
            field: "run.mode".into(),
            message: format!("checkpoint was written by a {:?} run", p.mode),
        });
    }
    log::info!("resuming from {} at step {}", path.display(), p.step);
    Ok(Some((c, p)))
}

/// Fixed evaluation set for the offline diagnostics.
pub struct Diagnostics {
    pub batch: Batch,
    /// Monte-Carlo return of each batch element's first transition.
    pub mc: Vec<f64>,
}

impl Diagnostics {
    pub fn new(data: &ReplayBuffer, size: usize, n: usize, gamma: f64, seed: u64) -> Result<Self> {
        let starts = data.valid_starts(n);
        if starts.is_empty() {
            return Err(Error::InvalidArgument("dataset has no complete n-step window".into()));
        }
        // Windows whose n-step reward is non-zero are rare under a random
        // policy, so up to a quarter of the batch is reserved for them; the
        // zero/non-zero loss split is otherwise often empty on one side.
        let mut rewarded = std::collections::HashSet::new();
        for (first, rewards) in data.episodes() {
            for t in 0..rewards.len() {
                if rewards[t..(t + n).min(rewards.len())].iter().any(|&r| r != 0.0) {
                    rewarded.insert(first + t as u64);
                }
            }
        }
        let (hits, misses): (Vec<u64>, Vec<u64>) = starts.iter().partition(|i| rewarded.contains(i));
        let size = size.min(starts.len());
        let n_hits = hits.len().min(size / 4).max(size.saturating_sub(misses.len()));
        let mut rng = stream(seed, STREAM_DIAG_BATCH);
        let mut picks: Vec<u64> = sample(&mut rng, hits.len(), n_hits)
            .into_iter()
            .map(|k| hits[k])
            .collect();
        picks.extend(
            sample(&mut rng, misses.len(), size - n_hits)
                .into_iter()
                .map(|k| misses[k]),
        );
        picks.sort_unstable();
        let mc_all = data.monte_carlo_returns(gamma);
        let mc = picks.iter().map(|&i| mc_all[(i - data.start()) as usize]).collect();
        Ok(Self {
            batch: data.gather(&picks, n, gamma)?,
            mc,
        })
    }

    /// One metrics row of critic diagnostics at `step`.
    pub fn row(&self, agent: &mut AgentBundle, step: u64) -> Result<MetricsRow> {
        let probe = agent.probe_critic(&self.batch, TargetPolicy::Dataset)?;
        let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let split = |zero: bool| -> Vec<f64> {
            probe
                .sq_errors
                .iter()
                .zip(&self.batch.reward)
                .filter(|(_, r)| (**r == 0.0) == zero)
                .map(|(e, _)| *e)
                .collect()
        };
        let mut row = MetricsRow {
            step,
            td_loss: mean(&probe.sq_errors),
            td_loss_zero_reward: mean(&split(true)),
            td_loss_nonzero_reward: mean(&split(false)),
            q_mean: mean(&probe.q),
            pearson_target: pearson(&probe.q, &probe.target).ok(),
            pearson_mc: pearson(&probe.q, &self.mc).ok(),
            s: agent.config.use_lix.then(|| agent.radius()),
            ..MetricsRow::default()
        };
        if let Some(g) = &probe.feature_grad {
            let nd = agent.config.nd;
            // nd_instant and nd_accumulated score batch-mean maps so the two are
            // comparable; nd_robust is the per-sample score the controller uses.
            row.nd_instant = Some(nd_score(&batch_mean(g)?, &nd, &mut agent.rngs.diag)?);
            row.nd_robust = Some(robust_nd(g, &nd, &mut agent.rngs.diag)?);
            row.nd_accumulated = agent.grad_ema.score(&nd, &mut agent.rngs.diag)?;
        }
        Ok(row)
    }
}

fn eval_returns(cfg: &ExperimentConfig, agent: &AgentBundle, seed: u64) -> Result<Vec<f64>> {
    evaluate_policy(
        agent,
        cfg.env,
        cfg.metrics.eval_episodes,
        seed.wrapping_add(EVAL_SEED_OFFSET),
    )
}

/// Random-data collection, SARSA evaluation with periodic diagnostics, then
/// policy improvement and a final evaluation row.
pub fn run_offline(cfg: &ExperimentConfig, seed: u64, dir: &Path, resume: bool) -> Result<SeedSummary> {
    let a = &cfg.agent;
    let data = collect_random(cfg.env, cfg.offline.dataset_size, seed, a.proprioceptive)?;
    let diag = Diagnostics::new(&data, cfg.offline.diag_batch, a.n_step, a.gamma, seed)?;
    let eval = cfg.offline.eval_steps as u64;
    let total = eval + cfg.offline.improvement_steps as u64;

    let resumed = load_resume(dir, resume, Mode::OfflineEval)?;
    if let Some((_, p)) = &resumed {
        if p.done {
            let agent = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?.agent()?;
            return Ok(SeedSummary::new(
                seed,
                RunStatus::Ok,
                p.step,
                p.returns.clone(),
                a.use_lix.then(|| agent.radius()),
            ));
        }
    }
    let (mut agent, mut sampler, mut step, keep) = match resumed {
        Some((c, p)) => (c.agent()?, c.rng("run/sampler")?, p.step, Some(p.rows)),
        None => (initial_agent(cfg, seed)?, stream(seed, STREAM_SAMPLER), 0, None),
    };
    let (mut writer, mut rows) = reopen_metrics(dir, keep)?;
    if keep.is_none() {
        writer.write(&diag.row(&mut agent, 0)?)?;
        rows += 1;
    }

    let stop = cfg.run.stop_after.map_or(total, |s| (s as u64).min(total));
    let chunk = match cfg.run.checkpoint_every {
        0 => total.max(1),
        k => k as u64,
    };
    let cadence = cfg.metrics.cadence as u64;
    let progress = |step: u64, rows: usize, done: bool, returns: Vec<f64>| Progress {
        mode: Mode::OfflineEval,
        step,
        rows,
        done,
        returns,
        episode: 0,
        episode_return: 0.0,
        pending_returns: Vec::new(),
        env_state: None,
    };
    while step < stop {
        let end = ((step / chunk + 1) * chunk).min(stop);
        if step < eval {
            let upto = end.min(eval);
            let base = step;
            sarsa_policy_evaluation(
                &mut agent,
                &data,
                (upto - base) as usize,
                &mut sampler,
                |k, agent, _| {
                    let s = base + k as u64;
                    if s % cadence == 0 || s == eval {
                        writer.write(&diag.row(agent, s)?)?;
                        rows += 1;
                    }
                    Ok(())
                },
            )?;
            step = upto;
        }
        if step >= eval && step < end {
            policy_improvement(&mut agent, &data, (end - step) as usize, &mut sampler, |_, _, _| Ok(()))?;
            step = end;
        }
        if step < total {
            save_progress(dir, &agent, &progress(step, rows, false, Vec::new()), |c| {
                c.put_rng("run/sampler", &sampler)
            })?;
        }
    }
    if step < total {
        log::info!("stopped at step {step} of {total}");
        return Ok(SeedSummary::new(seed, RunStatus::Stopped, step, Vec::new(), None));
    }
    let returns = eval_returns(cfg, &agent, seed)?;
    let (m, _) = mean_std(&returns);
    writer.write(&MetricsRow {
        step: total,
        episode_return: Some(m),
        s: a.use_lix.then(|| agent.radius()),
        ..MetricsRow::default()
    })?;
    rows += 1;
    save_progress(dir, &agent, &progress(total, rows, true, returns.clone()), |c| {
        c.put_rng("run/sampler", &sampler)
    })?;
    Ok(SeedSummary::new(
        seed,
        RunStatus::Ok,
        total,
        returns,
        a.use_lix.then(|| agent.radius()),
    ))
}

/// Running means between two metrics rows of an online run.
#[derive(Default)]
struct Window {
    td: Vec<f64>,
    q: Vec<f64>,
    nd: Vec<f64>,
}

fn avg(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Interleaved acting and learning with decaying Gaussian exploration.
pub fn run_online(cfg: &ExperimentConfig, seed: u64, dir: &Path, resume: bool) -> Result<SeedSummary> {
    let a = &cfg.agent;
    let o = &cfg.online;
    let total = o.total_steps as u64;
    let cadence = cfg.metrics.cadence as u64;
    let n = cfg.env.image_size;
    let episode_seed = |k: u64| seed.wrapping_mul(1_000_003).wrapping_add(k);
    let mut env = DotReacher::new(cfg.env)?;

    let resumed = load_resume(dir, resume, Mode::Online)?;
    if let Some((c, p)) = &resumed {
        if p.done {
            let agent = c.agent()?;
            return Ok(SeedSummary::new(
                seed,
                RunStatus::Ok,
                p.step,
                p.returns.clone(),
                a.use_lix.then(|| agent.radius()),
            ));
        }
    }
    let mut window = Window::default();
    let (mut agent, mut buffer, mut rng, mut step, mut episode, mut ep_return, mut pending, mut obs, keep) =
        match resumed {
            Some((c, p)) => {
                let obs = c.tensor("run/obs")?;
                let state = p
                    .env_state
                    .ok_or_else(|| Error::Integrity("online checkpoint lacks the environment state".into()))?;
                env.restore(state, &obs)?;
                (
                    c.agent()?,
                    c.replay("run/replay")?,
                    c.rng("run/explore")?,
                    p.step,
                    p.episode,
                    p.episode_return,
                    p.pending_returns,
                    obs,
                    Some(p.rows),
                )
            }
            None => {
                let obs = env.reset(episode_seed(0));
                (
                    initial_agent(cfg, seed)?,
                    ReplayBuffer::new(o.buffer_capacity, &[cfg.env.frame_stack, n, n])?,
                    stream(seed, STREAM_EXPLORE),
                    0,
                    0,
                    0.0,
                    Vec::new(),
                    obs,
                    None,
                )
            }
        };
    let stop = cfg.run.stop_after.map_or(total, |s| (s as u64).min(total));
    if stop < total && stop % cadence != 0 {
        return Err(Error::Usage {
            field: "run.stop_after".into(),
            message: "online runs can only stop on a metrics tick".into(),
        });
    }
    let (mut writer, mut rows) = reopen_metrics(dir, keep)?;
    let mut all_returns: Vec<f64> = Vec::new();

    let save = |agent: &AgentBundle,
                step: u64,
                rows: usize,
                episode: u64,
                ep_return: f64,
                pending: &[f64],
                env: &DotReacher,
                buffer: &ReplayBuffer,
                rng: &ChaCha8Rng,
                obs: &crate::tensor::Tensor| {
        let p = Progress {
            mode: Mode::Online,
            step,
            rows,
            done: false,
            returns: Vec::new(),
            episode,
            episode_return: ep_return,
            pending_returns: pending.to_vec(),
            env_state: Some(env.state),
        };
        save_progress(dir, agent, &p, |c| {
            c.put_replay("run/replay", buffer);
            c.put_rng("run/explore", rng);
            c.put_tensor("run/obs", obs);
        })
    };

    while step < stop {
        step += 1;
        let proprio = env.proprio_state();
        let action = if step <= o.seed_steps as u64 {
            vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
        } else {
            agent.act(
                &obs,
                a.proprioceptive.then_some(&proprio[..]),
                o.noise_at(step as usize),
                &mut rng,
            )?
        };
        let (next, out) = env.step(&action)?;
        ep_return += out.reward;
        buffer.push(Transition {
            obs: obs.clone(),
            action,
            reward: out.reward,
            next_obs: next.clone(),
            done: out.done,
            proprio: a.proprioceptive.then(|| proprio.to_vec()),
            next_proprio: a.proprioceptive.then(|| env.proprio_state().to_vec()),
        })?;
        obs = if out.done {
            pending.push(ep_return);
            all_returns.push(ep_return);
            ep_return = 0.0;
            episode += 1;
            env.reset(episode_seed(episode))
        } else {
            next
        };
        if step > o.seed_steps as u64 {
            let batch = buffer.sample_nstep(a.batch_size, a.n_step, a.gamma, &mut rng)?;
            let stats = agent.critic_update(&batch, TargetPolicy::Actor)?;
            agent.actor_update(&batch)?;
            window.td.push(stats.td_loss);
            window.q.push(stats.q.iter().sum::<f64>() / stats.q.len() as f64);
            window.nd.extend(stats.nd_measurement);
        }
        if step % cadence == 0 {
            writer.write(&MetricsRow {
                step,
                td_loss: avg(&window.td),
                q_mean: avg(&window.q),
                nd_robust: avg(&window.nd),
                s: a.use_lix.then(|| agent.radius()),
                episode_return: avg(&pending),
                ..MetricsRow::default()
            })?;
            rows += 1;
            window = Window::default();
            pending.clear();
            let every = cfg.run.checkpoint_every as u64;
            if (every > 0 && step % every == 0) || step == stop {
                if step < total {
                    save(
                        &agent, step, rows, episode, ep_return, &pending, &env, &buffer, &rng, &obs,
                    )?;
                }
            }
        }
    }
    if step < total {
        return Ok(SeedSummary::new(seed, RunStatus::Stopped, step, Vec::new(), None));
    }
    let returns = eval_returns(cfg, &agent, seed)?;
    let p = Progress {
        mode: Mode::Online,
        step,
        rows,
        done: true,
        returns: returns.clone(),
        episode,
        episode_return: ep_return,
        pending_returns: Vec::new(),
        env_state: Some(env.state),
    };
    save_progress(dir, &agent, &p, |_| ())?;
    log::info!("{} training episodes finished", all_returns.len());
    Ok(SeedSummary::new(
        seed,
        RunStatus::Ok,
        step,
        returns,
        a.use_lix.then(|| agent.radius()),
    ))
}

/// Encoder sensitivity report written to `probe.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub seed: u64,
    pub samples: usize,
    pub jacobian_frobenius: f64,
    /// `(amplitude, TD-loss)` pairs.
    pub checkerboard: Vec<(f64, f64)>,
}

/// Jacobian norm and checkerboard sensitivity of a (possibly trained) agent on
/// a fixed batch of random-policy data.
pub fn run_probe(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<ProbeReport> {
    let mut agent = match &cfg.probe.checkpoint {
        Some(p) => Checkpoint::load(&seeded_path(p, seed))?.agent()?,
        None => initial_agent(cfg, seed)?,
    };
    if agent.encoder.is_none() {
        return Err(Error::Usage {
            field: "agent.proprioceptive".into(),
            message: "probing needs a pixel encoder".into(),
        });
    }
    let n = agent.config.n_step;
    let gamma = agent.config.gamma;
    let data = collect_random(cfg.env, cfg.probe.samples.max(4 * n) + n, seed, false)?;
    let diag = Diagnostics::new(&data, cfg.probe.samples, n, gamma, seed)?;
    let mut rng = stream(seed, STREAM_PROBE);
    let enc = agent.encoder.clone().expect("checked above");
    let jacobian = jacobian_frobenius(&enc, &diag.batch.obs, cfg.probe.n_probes, &mut rng)?;
    let targets = agent.td_targets(&diag.batch, &diag.batch.reward.clone(), TargetPolicy::Dataset)?;
    let features = agent.conv_features(&diag.batch.obs)?;
    let curve = checkerboard_probe(&features, &cfg.probe.amplitudes, |z| {
        agent.critic_loss_on_features(z, &diag.batch.action, &targets)
    })?;
    let report = ProbeReport {
        seed,
        samples: diag.batch.len(),
        jacobian_frobenius: jacobian,
        checkerboard: curve,
    };
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join(PROBE_FILE), &report)?;
    Ok(report)
}

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// One environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Pixels `[C, H, W]` in `[0, 1]`.
    pub obs: Tensor,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Tensor,
    pub done: bool,
    pub proprio: Option<Vec<f64>>,
    pub next_proprio: Option<Vec<f64>>,
}

/// A sampled minibatch of n-step transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub obs: Tensor,
    pub action: Tensor,
    /// `Σ_{k<n} γᵏ r_{t+k}`, truncated at episode end.
    pub reward: Vec<f64>,
    /// Observation `n` steps ahead (or at termination).
    pub next_obs: Tensor,
    /// `γ^k` for the `k` rewards summed.
    pub discount: Vec<f64>,
    pub done: Vec<bool>,
    /// Recorded action at the bootstrap state; zeros where the window ends in
    /// termination.
    pub next_action: Tensor,
    pub proprio: Option<Tensor>,
    pub next_proprio: Option<Tensor>,
    /// Logical buffer indices of the window starts.
    pub indices: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    obs: Vec<u8>,
    action: Vec<f64>,
    reward: f64,
    next_obs: Vec<u8>,
    done: bool,
    proprio: Option<Vec<f64>>,
    next_proprio: Option<Vec<f64>>,
    episode: u64,
}

/// Ring buffer of transitions. Pixels are stored at 8-bit precision.
///
/// Transitions are addressed by a logical index that counts every push; the
/// live range is `[total − len, total)`. Consecutive pushes belong to one
/// episode until a terminal transition or an explicit [`end_episode`].
///
/// [`end_episode`]: ReplayBuffer::end_episode
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_shape: Vec<usize>,
    slots: Vec<Slot>,
    total: u64,
    episode: u64,
}

/// Flat copy of a buffer's contents, in storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySnapshot {
    pub capacity: usize,
    pub obs_shape: Vec<usize>,
    pub total: u64,
    pub episode: u64,
    pub action_dim: usize,
    /// Proprio width, 0 when absent.
    pub proprio_dim: usize,
    pub obs: Vec<u8>,
    pub next_obs: Vec<u8>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<u8>,
    pub episodes: Vec<u64>,
    pub proprio: Vec<f64>,
    pub next_proprio: Vec<f64>,
}

fn quantize(t: &Tensor) -> Vec<u8> {
    t.data().iter().map(|v| (v * 255.0).round() as u8).collect()
}

fn dequantize(q: &[u8], out: &mut Vec<f64>) {
    out.extend(q.iter().map(|&v| f64::from(v) / 255.0));
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_shape: &[usize]) -> Result<Self> {
        if capacity == 0 || obs_shape.len() != 3 {
            return invalid(format!(
                "replay buffer needs capacity ≥ 1 and a [C,H,W] shape, got {capacity} and {obs_shape:?}"
            ));
        }
        Ok(Self {
            capacity,
            obs_shape: obs_shape.to_vec(),
            slots: Vec::new(),
            total: 0,
            episode: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn obs_shape(&self) -> &[usize] {
        &self.obs_shape
    }

    /// Logical index of the oldest live transition.
    pub fn start(&self) -> u64 {
        self.total - self.slots.len() as u64
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    fn slot(&self, index: u64) -> &Slot {
        &self.slots[(index % self.capacity as u64) as usize]
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.obs.shape() != self.obs_shape.as_slice() || t.next_obs.shape() != self.obs_shape.as_slice() {
            return invalid(format!(
                "observation shape {:?} does not match buffer shape {:?}",
                t.obs.shape(),
                self.obs_shape
            ));
        }
        let in_range = |x: &Tensor| x.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&t.obs) || !in_range(&t.next_obs) {
            return invalid("pixel values must lie in [0, 1]");
        }
        if !t.reward.is_finite() || t.action.iter().any(|a| !a.is_finite()) {
            return invalid("non-finite reward or action");
        }
        if let Some(first) = self.slots.first() {
            if first.action.len() != t.action.len() || first.proprio.is_some() != t.proprio.is_some() {
                return invalid("transition layout differs from the buffer contents");
            }
        }
        if t.proprio.is_some() != t.next_proprio.is_some() {
            return invalid("proprio and next_proprio must be given together");
        }
        let slot = Slot {
            obs: quantize(&t.obs),
            action: t.action,
            reward: t.reward,
            next_obs: quantize(&t.next_obs),
            done: t.done,
            proprio: t.proprio,
            next_proprio: t.next_proprio,
            episode: self.episode,
        };
        if self.slots.len() < self.capacity {
            self.slots.push(slot);
        } else {
            let k = (self.total % self.capacity as u64) as usize;
            self.slots[k] = slot;
        }
        self.total += 1;
        if t.done {
            self.episode += 1;
        }
        Ok(())
    }

    /// Starts a new episode without a terminal transition.
    pub fn end_episode(&mut self) {
        if self.total > 0 && self.slot(self.total - 1).episode == self.episode {
            self.episode += 1;
        }
    }

    /// Number of rewards the window starting at `index` sums, or `None` when
    /// the window leaves the buffer, crosses an episode boundary or lacks a
    /// recorded bootstrap action.
    fn window(&self, index: u64, n: usize) -> Option<usize> {
        let ep = self.slot(index).episode;
        for k in 0..n as u64 {
            let j = index + k;
            if j >= self.total || self.slot(j).episode != ep {
                return None;
            }
            if self.slot(j).done {
                return Some(k as usize + 1);
            }
        }
        let j = index + n as u64;
        (j < self.total && self.slot(j).episode == ep).then_some(n)
    }

    /// Logical indices at which an `n`-step window can start.
    pub fn valid_starts(&self, n: usize) -> Vec<u64> {
        (self.start()..self.total)
            .filter(|&i| self.window(i, n).is_some())
            .collect()
    }

    pub fn sample_nstep<R: Rng + ?Sized>(&self, batch_size: usize, n: usize, gamma: f64, rng: &mut R) -> Result<Batch> {
        if n == 0 || batch_size == 0 {
            return invalid("n and batch_size must be at least 1");
        }
        if self.len() < n {
            return Err(Error::InvalidState(format!(
                "buffer holds {} transitions, fewer than n = {n}",
                self.len()
            )));
        }
        let starts = self.valid_starts(n);
        if starts.is_empty() {
            return Err(Error::InvalidState("no complete n-step window in the buffer".into()));
        }
        let picks: Vec<u64> = (0..batch_size)
            .map(|_| starts[rng.random_range(0..starts.len())])
            .collect();
        self.gather(&picks, n, gamma)
    }

    /// Assembles the `n`-step windows starting at `indices`.
    pub fn gather(&self, indices: &[u64], n: usize, gamma: f64) -> Result<Batch> {
        if indices.is_empty() {
            return invalid("empty index list");
        }
        let b = indices.len();
        let adim = self.slot(indices[0]).action.len();
        let pdim = self.slot(indices[0]).proprio.as_ref().map(Vec::len);
        let plane: usize = self.obs_shape.iter().product();
        let mut obs = Vec::with_capacity(b * plane);
        let mut next_obs = Vec::with_capacity(b * plane);
        let mut action = Vec::with_capacity(b * adim);
        let mut next_action = Vec::with_capacity(b * adim);
        let mut proprio = Vec::new();
        let mut next_proprio = Vec::new();
        let (mut reward, mut discount, mut done) = (Vec::new(), Vec::new(), Vec::new());
        for &i in indices {
            if i < self.start() || i >= self.total {
                return invalid(format!("index {i} is not live"));
            }
            let steps = self
                .window(i, n)
                .ok_or_else(|| Error::InvalidArgument(format!("no {n}-step window starts at {i}")))?;
            let first = self.slot(i);
            let last = self.slot(i + steps as u64 - 1);
            let mut r = 0.0;
            let mut g = 1.0;
            for k in 0..steps as u64 {
                r += g * self.slot(i + k).reward;
                g *= gamma;
            }
            reward.push(r);
            discount.push(g);
            done.push(last.done);
            dequantize(&first.obs, &mut obs);
            dequantize(&last.next_obs, &mut next_obs);
            action.extend_from_slice(&first.action);
            if last.done {
                next_action.extend(std::iter::repeat_n(0.0, adim));
            } else {
                next_action.extend_from_slice(&self.slot(i + steps as u64).action);
            }
            if let (Some(p), Some(np)) = (&first.proprio, &last.next_proprio) {
                proprio.extend_from_slice(p);
                next_proprio.extend_from_slice(np);
            }
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&self.obs_shape);
        let (proprio, next_proprio) = match pdim {
            Some(d) => (
                Some(Tensor::new(&[b, d], proprio)?),
                Some(Tensor::new(&[b, d], next_proprio)?),
            ),
            None => (None, None),
        };
        Ok(Batch {
            obs: Tensor::new(&shape, obs)?,
            action: Tensor::new(&[b, adim], action)?,
            reward,
            next_obs: Tensor::new(&shape, next_obs)?,
            discount,
            done,
            next_action: Tensor::new(&[b, adim], next_action)?,
            proprio,
            next_proprio,
            indices: indices.to_vec(),
        })
    }

    pub fn snapshot(&self) -> ReplaySnapshot {
        let first = self.slots.first();
        let mut snap = ReplaySnapshot {
            capacity: self.capacity,
            obs_shape: self.obs_shape.clone(),
            total: self.total,
            episode: self.episode,
            action_dim: first.map_or(0, |s| s.action.len()),
            proprio_dim: first.and_then(|s| s.proprio.as_ref()).map_or(0, Vec::len),
            obs: Vec::new(),
            next_obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            episodes: Vec::new(),
            proprio: Vec::new(),
            next_proprio: Vec::new(),
        };
        for s in &self.slots {
            snap.obs.extend_from_slice(&s.obs);
            snap.next_obs.extend_from_slice(&s.next_obs);
            snap.actions.extend_from_slice(&s.action);
            snap.rewards.push(s.reward);
            snap.dones.push(u8::from(s.done));
            snap.episodes.push(s.episode);
            if let (Some(p), Some(np)) = (&s.proprio, &s.next_proprio) {
                snap.proprio.extend_from_slice(p);
                snap.next_proprio.extend_from_slice(np);
            }
        }
        snap
    }

    pub fn from_snapshot(snap: &ReplaySnapshot) -> Result<Self> {
        let mut buf = Self::new(snap.capacity, &snap.obs_shape)?;
        let n = snap.rewards.len();
        let plane: usize = snap.obs_shape.iter().product();
        let consistent = n <= snap.capacity
            && n as u64 <= snap.total
            && snap.obs.len() == n * plane
            && snap.next_obs.len() == n * plane
            && snap.actions.len() == n * snap.action_dim
            && snap.dones.len() == n
            && snap.episodes.len() == n
            && snap.proprio.len() == n * snap.proprio_dim
            && snap.next_proprio.len() == n * snap.proprio_dim;
        if !consistent {
            return invalid("replay snapshot fields disagree in length");
        }
        let pd = snap.proprio_dim;
        buf.slots = (0..n)
            .map(|i| Slot {
                obs: snap.obs[i * plane..(i + 1) * plane].to_vec(),
                action: snap.actions[i * snap.action_dim..(i + 1) * snap.action_dim].to_vec(),
                reward: snap.rewards[i],
                next_obs: snap.next_obs[i * plane..(i + 1) * plane].to_vec(),
                done: snap.dones[i] != 0,
                proprio: (pd > 0).then(|| snap.proprio[i * pd..(i + 1) * pd].to_vec()),
                next_proprio: (pd > 0).then(|| snap.next_proprio[i * pd..(i + 1) * pd].to_vec()),
                episode: snap.episodes[i],
            })
            .collect();
        buf.total = snap.total;
        buf.episode = snap.episode;
        Ok(buf)
    }

    /// Rewards of every live transition grouped by episode, oldest first.
    /// The oldest and newest episodes may be partial.
    pub fn episodes(&self) -> Vec<(u64, Vec<f64>)> {
        let mut out: Vec<(u64, Vec<f64>)> = Vec::new();
        for i in self.start()..self.total {
            let s = self.slot(i);
            match out.last_mut() {
                Some((_, rewards)) if self.slot(i - 1).episode == s.episode => rewards.push(s.reward),
                _ => out.push((i, vec![s.reward])),
            }
        }
        out
    }

    /// Discounted return from every live transition to the end of its episode,
    /// indexed like [`ReplayBuffer::start`]`..total`.
    pub fn monte_carlo_returns(&self, gamma: f64) -> Vec<f64> {
        let episodes: Vec<Vec<f64>> = self.episodes().into_iter().map(|(_, r)| r).collect();
        super::monte_carlo_returns(&episodes, gamma)
            .into_iter()
            .flatten()
            .collect()
    }

    /// Raw single-step rewards of the live transitions.
    pub fn rewards(&self) -> Vec<f64> {
        (self.start()..self.total).map(|i| self.slot(i).reward).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(v: f64) -> Tensor {
        Tensor::full(&[1, 2, 2], v)
    }

    fn tr(reward: f64, done: bool, a: f64) -> Transition {
        Transition {
            obs: obs(a.abs().min(1.0)),
            action: vec![a],
            reward,
            next_obs: obs(0.5),
            done,
            proprio: None,
            next_proprio: None,
        }
    }

    fn filled(rewards: &[f64], dones: &[bool]) -> ReplayBuffer {
        let mut buf = ReplayBuffer::new(1000, &[1, 2, 2]).unwrap();
        for (k, (&r, &d)) in rewards.iter().zip(dones).enumerate() {
            buf.push(tr(r, d, k as f64 / 100.0)).unwrap();
        }
        buf
    }

    #[test]
    fn one_step_and_three_step_returns() {
        let buf = filled(&[1.0, 1.0, 1.0, 0.0], &[false; 4]);
        let b = buf.gather(&[0], 1, 0.99).unwrap();
        assert_eq!((b.reward[0], b.discount[0], b.done[0]), (1.0, 0.99, false));
        let b = buf.gather(&[0], 3, 0.99).unwrap();
        assert!((b.reward[0] - 2.9701).abs() < 1e-12);
        assert!((b.discount[0] - 0.99f64.powi(3)).abs() < 1e-15);
        assert_eq!(b.next_action.data(), &[0.03]);
    }

    #[test]
    fn windows_truncate_at_termination() {
        let buf = filled(&[1.0, 2.0, 3.0, 4.0], &[false, true, false, false]);
        let b = buf.gather(&[0], 3, 0.5).unwrap();
        assert_eq!(b.reward[0], 2.0);
        assert!(b.done[0]);
        assert_eq!(b.next_action.data(), &[0.0]);
        // Start at 2: window [2, 3] needs transition 5 for the bootstrap action.
        assert!(buf.gather(&[2], 3, 0.5).is_err());
        assert_eq!(buf.valid_starts(3), vec![0, 1]);
        assert_eq!(buf.valid_starts(1), vec![0, 1, 2]);
    }

    #[test]
    fn small_buffer_is_invalid_state() {
        let buf = filled(&[1.0, 1.0], &[false, false]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            buf.sample_nstep(4, 3, 0.99, &mut rng),
            Err(Error::InvalidState(_))
        ));
        assert!(buf.sample_nstep(4, 0, 0.99, &mut rng).is_err());
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut buf = ReplayBuffer::new(3, &[1, 2, 2]).unwrap();
        for k in 0..5 {
            buf.push(tr(k as f64, false, 0.0)).unwrap();
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.start(), 2);
        assert_eq!(buf.rewards(), vec![2.0, 3.0, 4.0]);
        assert!(buf.gather(&[1], 1, 0.9).is_err());
        assert_eq!(buf.gather(&[2], 1, 0.9).unwrap().reward, vec![2.0]);
    }

    #[test]
    fn explicit_episode_end_blocks_windows() {
        let mut buf = filled(&[1.0, 1.0], &[false, false]);
        buf.end_episode();
        buf.push(tr(5.0, false, 0.0)).unwrap();
        buf.push(tr(5.0, false, 0.0)).unwrap();
        assert_eq!(buf.valid_starts(1), vec![0, 2]);
        assert_eq!(buf.episodes().len(), 2);
    }

    #[test]
    fn push_validation() {
        let mut buf = ReplayBuffer::new(4, &[1, 2, 2]).unwrap();
        let mut t = tr(0.0, false, 0.0);
        t.obs = Tensor::full(&[1, 2, 2], 1.5);
        assert!(buf.push(t).is_err());
        let mut t = tr(0.0, false, 0.0);
        t.next_obs = Tensor::zeros(&[1, 3, 2]);
        assert!(buf.push(t).is_err());
        assert!(ReplayBuffer::new(0, &[1, 2, 2]).is_err());
    }

    #[test]
    fn pixels_roundtrip_at_eight_bits() {
        let mut buf = ReplayBuffer::new(4, &[1, 2, 2]).unwrap();
        let levels = Tensor::new(&[1, 2, 2], vec![0.0, 1.0 / 255.0, 128.0 / 255.0, 1.0]).unwrap();
        let mut t = tr(0.0, true, 0.0);
        t.obs = levels.clone();
        buf.push(t).unwrap();
        let b = buf.gather(&[0], 1, 0.9).unwrap();
        assert_eq!(b.obs.data(), levels.data());
    }

    proptest! {
        #[test]
        fn sampled_returns_match_scalar_oracle(
            steps in proptest::collection::vec((0.0f64..1.0, proptest::bool::weighted(0.1)), 10..80),
            n in 1usize..6,
            seed in 0u64..1000,
        ) {
            let rewards: Vec<f64> = steps.iter().map(|s| s.0).collect();
            let dones: Vec<bool> = steps.iter().map(|s| s.1).collect();
            let buf = filled(&rewards, &dones);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gamma = 0.97;
            match buf.sample_nstep(16, n, gamma, &mut rng) {
                Ok(batch) => {
                    for (k, &i) in batch.indices.iter().enumerate() {
                        let i = i as usize;
                        let (mut want, mut g, mut end) = (0.0, 1.0, false);
                        for j in i..i + n {
                            prop_assert!(j < rewards.len());
                            want += g * rewards[j];
                            g *= gamma;
                            if dones[j] {
                                end = true;
                                break;
                            }
                        }
                        prop_assert_eq!(batch.reward[k], want);
                        prop_assert_eq!(batch.discount[k], g);
                        prop_assert_eq!(batch.done[k], end);
                    }
                }
                Err(e) => prop_assert!(matches!(e, Error::InvalidState(_))),
            }
        }
    }
}

//! Binary checkpoints: little-endian, magic string, version, a directory of
//! named arrays and a trailing SHA-256 over everything before it.
//!
//! ```text
//! "ALIXCKPT" u32:version u32:count
//! count × { u32:name_len name u8:kind u32:rank rank×u64:dims payload }
//! [32]u8:sha256
//! ```

use crate::error::{Error, Result};
use crate::metrics::GradEmaState;
use crate::nn::{Adam, Module};
use crate::rl::{AgentBundle, AgentConfig, AgentRngs, ReplayBuffer, ReplaySnapshot, RunningStats};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"ALIXCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Array {
    F64 { dims: Vec<usize>, data: Vec<f64> },
    U8 { dims: Vec<usize>, data: Vec<u8> },
    U64 { dims: Vec<usize>, data: Vec<u64> },
}

impl Array {
    fn kind(&self) -> u8 {
        match self {
            Array::F64 { .. } => 0,
            Array::U8 { .. } => 1,
            Array::U64 { .. } => 2,
        }
    }

    fn dims(&self) -> &[usize] {
        match self {
            Array::F64 { dims, .. } | Array::U8 { dims, .. } | Array::U64 { dims, .. } => dims,
        }
    }
}

/// An ordered map of named arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Array>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_f64(&mut self, name: &str, dims: &[usize], data: Vec<f64>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.entries.insert(
            name.into(),
            Array::F64 {
                dims: dims.to_vec(),
                data,
            },
        );
    }

    pub fn put_scalars(&mut self, name: &str, data: &[f64]) {
        self.put_f64(name, &[data.len()], data.to_vec());
    }

    pub fn put_u8(&mut self, name: &str, data: Vec<u8>) {
        self.entries.insert(
            name.into(),
            Array::U8 {
                dims: vec![data.len()],
                data,
            },
        );
    }

    pub fn put_u64(&mut self, name: &str, data: &[u64]) {
        self.entries.insert(
            name.into(),
            Array::U64 {
                dims: vec![data.len()],
                data: data.to_vec(),
            },
        );
    }

    pub fn put_tensor(&mut self, name: &str, t: &Tensor) {
        self.put_f64(name, t.shape(), t.data().to_vec());
    }

    pub fn put_json<T: serde::Serialize>(&mut self, name: &str, value: &T) {
        let text = serde_json::to_vec(value).expect("serializable value");
        self.put_u8(name, text);
    }

    fn get(&self, name: &str) -> Result<&Array> {
        self.entries
            .get(name)
            .ok_or_else(|| corrupt(format!("missing entry `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name)? {
            Array::F64 { dims, data } => Ok((dims, data)),
            _ => Err(corrupt(format!("entry `{name}` is not f64"))),
        }
    }

    pub fn u8s(&self, name: &str) -> Result<&[u8]> {
        match self.get(name)? {
            Array::U8 { data, .. } => Ok(data),
            _ => Err(corrupt(format!("entry `{name}` is not u8"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            Array::U64 { data, .. } => Ok(data),
            _ => Err(corrupt(format!("entry `{name}` is not u64"))),
        }
    }

    pub fn scalars<const N: usize>(&self, name: &str) -> Result<[f64; N]> {
        let (_, d) = self.f64s(name)?;
        d.try_into()
            .map_err(|_| corrupt(format!("entry `{name}` should hold {N} values")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let (dims, data) = self.f64s(name)?;
        Tensor::new(dims, data.to_vec())
    }

    pub fn json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        serde_json::from_slice(self.u8s(name)?).map_err(|e| corrupt(format!("entry `{name}`: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, array) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(array.kind());
            out.extend_from_slice(&(array.dims().len() as u32).to_le_bytes());
            for &d in array.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match array {
                Array::F64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Array::U8 { data, .. } => out.extend_from_slice(data),
                Array::U64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Incompatible {
                found: version.to_string(),
                expected: VERSION.to_string(),
            });
        }
        if bytes.len() < 12 + 32 {
            return Err(corrupt("checkpoint is truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| corrupt("entry name is not UTF-8"))?
                .to_string();
            let kind = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt("entry size overflows"))?;
            let array = match kind {
                0 => Array::F64 {
                    data: (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<_>>()?,
                    dims,
                },
                1 => Array::U8 {
                    data: r.take(n)?.to_vec(),
                    dims,
                },
                2 => Array::U64 {
                    data: (0..n).map(|_| r.u64()).collect::<Result<_>>()?,
                    dims,
                },
                k => return Err(corrupt(format!("unknown entry kind {k}"))),
            };
            entries.insert(name, array);
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after the last entry"));
        }
        Ok(Self { entries })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn put_rng(&mut self, name: &str, rng: &ChaCha8Rng) {
        self.put_u8(&format!("{name}.seed"), rng.get_seed().to_vec());
        let pos = rng.get_word_pos();
        self.put_u64(
            &format!("{name}.state"),
            &[rng.get_stream(), pos as u64, (pos >> 64) as u64],
        );
    }

    pub fn rng(&self, name: &str) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .u8s(&format!("{name}.seed"))?
            .try_into()
            .map_err(|_| corrupt(format!("`{name}` seed must be 32 bytes")))?;
        let state = self.u64s(&format!("{name}.state"))?;
        if state.len() != 3 {
            return Err(corrupt(format!("`{name}` state must hold 3 words")));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(state[0]);
        rng.set_word_pos(u128::from(state[1]) | (u128::from(state[2]) << 64));
        Ok(rng)
    }

    pub fn put_module<M: Module + ?Sized>(&mut self, prefix: &str, module: &M) {
        for (name, p) in module.parameter_names().iter().zip(module.parameters()) {
            self.put_tensor(&format!("{prefix}/{name}"), p);
        }
    }

    /// Overwrites every parameter of `module`; shapes must agree.
    pub fn load_module<M: Module + ?Sized>(&self, prefix: &str, module: &mut M) -> Result<()> {
        let names = module.parameter_names();
        for (name, p) in names.iter().zip(module.parameters_mut()) {
            let key = format!("{prefix}/{name}");
            let (dims, data) = self.f64s(&key)?;
            if dims != p.shape() {
                return Err(corrupt(format!("`{key}` has shape {dims:?}, expected {:?}", p.shape())));
            }
            p.data_mut().copy_from_slice(data);
        }
        Ok(())
    }

    fn put_adam(&mut self, prefix: &str, opt: &Adam) {
        for (k, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
            self.put_f64(&format!("{prefix}/m{k}"), &[m.len()], m.clone());
            self.put_f64(&format!("{prefix}/v{k}"), &[v.len()], v.clone());
        }
        self.put_u64(&format!("{prefix}/step"), &[opt.step]);
    }

    fn load_adam(&self, prefix: &str, opt: &mut Adam) -> Result<()> {
        for k in 0..opt.m.len() {
            for (tag, buf) in [("m", &mut opt.m[k]), ("v", &mut opt.v[k])] {
                let key = format!("{prefix}/{tag}{k}");
                let (_, data) = self.f64s(&key)?;
                if data.len() != buf.len() {
                    return Err(corrupt(format!("`{key}` has the wrong length")));
                }
                buf.copy_from_slice(data);
            }
        }
        opt.step = self.u64s(&format!("{prefix}/step"))?.first().copied().unwrap_or(0);
        Ok(())
    }

    pub fn put_replay(&mut self, prefix: &str, buf: &ReplayBuffer) {
        let s = buf.snapshot();
        let dims: Vec<u64> = s.obs_shape.iter().map(|&d| d as u64).collect();
        self.put_u64(
            &format!("{prefix}/layout"),
            &[
                s.capacity as u64,
                s.total,
                s.episode,
                s.action_dim as u64,
                s.proprio_dim as u64,
            ],
        );
        self.put_u64(&format!("{prefix}/obs_shape"), &dims);
        self.put_u8(&format!("{prefix}/obs"), s.obs);
        self.put_u8(&format!("{prefix}/next_obs"), s.next_obs);
        self.put_scalars(&format!("{prefix}/actions"), &s.actions);
        self.put_scalars(&format!("{prefix}/rewards"), &s.rewards);
        self.put_u8(&format!("{prefix}/dones"), s.dones);
        self.put_u64(&format!("{prefix}/episodes"), &s.episodes);
        self.put_scalars(&format!("{prefix}/proprio"), &s.proprio);
        self.put_scalars(&format!("{prefix}/next_proprio"), &s.next_proprio);
    }

    pub fn replay(&self, prefix: &str) -> Result<ReplayBuffer> {
        let layout = self.u64s(&format!("{prefix}/layout"))?;
        let &[capacity, total, episode, action_dim, proprio_dim] = layout else {
            return Err(corrupt("replay layout must hold 5 words"));
        };
        let f = |name: &str| self.f64s(&format!("{prefix}/{name}")).map(|(_, d)| d.to_vec());
        let snap = ReplaySnapshot {
            capacity: capacity as usize,
            obs_shape: self
                .u64s(&format!("{prefix}/obs_shape"))?
                .iter()
                .map(|&d| d as usize)
                .collect(),
            total,
            episode,
            action_dim: action_dim as usize,
            proprio_dim: proprio_dim as usize,
            obs: self.u8s(&format!("{prefix}/obs"))?.to_vec(),
            next_obs: self.u8s(&format!("{prefix}/next_obs"))?.to_vec(),
            actions: f("actions")?,
            rewards: f("rewards")?,
            dones: self.u8s(&format!("{prefix}/dones"))?.to_vec(),
            episodes: self.u64s(&format!("{prefix}/episodes"))?.to_vec(),
            proprio: f("proprio")?,
            next_proprio: f("next_proprio")?,
        };
        ReplayBuffer::from_snapshot(&snap).map_err(|e| corrupt(e.to_string()))
    }

    /// Stores everything needed to continue training `agent` bit-exactly.
    pub fn put_agent(&mut self, agent: &AgentBundle) {
        self.put_json("agent/config", &agent.config);
        if let (Some(e), Some(t), Some(o)) = (&agent.encoder, &agent.target_encoder, &agent.encoder_opt) {
            self.put_module("agent/encoder", e);
            self.put_module("agent/target_encoder", t);
            self.put_adam("agent/encoder_opt", o);
        }
        self.put_module("agent/critic", &agent.critic);
        self.put_module("agent/target_critic", &agent.target_critic);
        self.put_module("agent/actor", &agent.actor);
        self.put_adam("agent/critic_opt", &agent.critic_opt);
        self.put_adam("agent/actor_opt", &agent.actor_opt);
        let d = &agent.dual;
        self.put_scalars("agent/dual", &[d.radius, d.m, d.v]);
        self.put_u64("agent/dual_step", &[d.step]);
        let s = agent.reward_stats;
        self.put_scalars("agent/reward_stats", &[s.mean, s.m2]);
        self.put_u64("agent/reward_count", &[s.count]);
        if let Some(ema) = &agent.grad_ema.ema {
            self.put_tensor("agent/grad_ema", ema);
        }
        self.put_rng("agent/rng_aug", &agent.rngs.aug);
        self.put_rng("agent/rng_lix", &agent.rngs.lix);
        self.put_rng("agent/rng_diag", &agent.rngs.diag);
    }

    pub fn agent(&self) -> Result<AgentBundle> {
        let config: AgentConfig = self.json("agent/config")?;
        let mut a = AgentBundle::new(config, 0)?;
        if let (Some(e), Some(t), Some(o)) = (&mut a.encoder, &mut a.target_encoder, &mut a.encoder_opt) {
            self.load_module("agent/encoder", e)?;
            self.load_module("agent/target_encoder", t)?;
            self.load_adam("agent/encoder_opt", o)?;
        }
        self.load_module("agent/critic", &mut a.critic)?;
        self.load_module("agent/target_critic", &mut a.target_critic)?;
        self.load_module("agent/actor", &mut a.actor)?;
        self.load_adam("agent/critic_opt", &mut a.critic_opt)?;
        self.load_adam("agent/actor_opt", &mut a.actor_opt)?;
        let [radius, m, v] = self.scalars("agent/dual")?;
        a.dual.radius = radius;
        a.dual.m = m;
        a.dual.v = v;
        a.dual.step = self.u64s("agent/dual_step")?.first().copied().unwrap_or(0);
        let [mean, m2] = self.scalars("agent/reward_stats")?;
        a.reward_stats = RunningStats {
            count: self.u64s("agent/reward_count")?.first().copied().unwrap_or(0),
            mean,
            m2,
        };
        a.grad_ema = GradEmaState {
            ema: if self.contains("agent/grad_ema") {
                Some(self.tensor("agent/grad_ema")?)
            } else {
                None
            },
            decay: a.config.grad_ema_decay,
        };
        a.rngs = AgentRngs {
            aug: self.rng("agent/rng_aug")?,
            lix: self.rng("agent/rng_lix")?,
            diag: self.rng("agent/rng_diag")?,
        };
        Ok(a)
    }
}

pub fn save_checkpoint(agent: &AgentBundle, path: &Path) -> Result<()> {
    let mut c = Checkpoint::new();
    c.put_agent(agent);
    c.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<AgentBundle> {
    Checkpoint::load(path)?.agent()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EncoderConfig;
    use crate::rl::{ReplayBuffer, TargetPolicy, Transition};
    use rand::{Rng, RngCore};

    fn small_agent(use_lix: bool) -> AgentBundle {
        let mut encoder = EncoderConfig::desk_default();
        encoder.input_size = (12, 12);
        encoder.feature_maps = vec![4, 4];
        encoder.filter_sizes = vec![(3, 3), (3, 3)];
        encoder.strides = vec![2, 1];
        encoder.trunk_dim = 8;
        let cfg = AgentConfig {
            encoder,
            hidden_dim: 16,
            use_lix,
            batch_size: 4,
            ..AgentConfig::default()
        };
        AgentBundle::new(cfg, 5).unwrap()
    }

    fn buffer() -> ReplayBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut buf = ReplayBuffer::new(64, &[2, 12, 12]).unwrap();
        let mut frame = || Tensor::uniform(&[2, 12, 12], 0.0, 1.0, &mut rng);
        let frames: Vec<Tensor> = (0..21).map(|_| frame()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in 0..20 {
            buf.push(Transition {
                obs: frames[t].clone(),
                action: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                reward: if t % 5 == 0 { 0.1 } else { 0.0 },
                next_obs: frames[t + 1].clone(),
                done: false,
                proprio: None,
                next_proprio: None,
            })
            .unwrap();
        }
        buf
    }

    #[test]
    fn bytes_roundtrip_every_kind() {
        let mut c = Checkpoint::new();
        c.put_f64("a", &[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]);
        c.put_u8("b", vec![0, 255, 7]);
        c.put_u64("c", &[u64::MAX, 0]);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.f64s("a").unwrap().1[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corruption_and_truncation_are_integrity_errors() {
        let mut c = Checkpoint::new();
        c.put_f64("w", &[3], vec![1.0, 2.0, 3.0]);
        let bytes = c.to_bytes();
        for i in [12, 20, bytes.len() - 40, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(
                matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity(_))),
                "byte {i}"
            );
        }
        for cut in [0, 5, 13, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Integrity(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn version_mismatch_is_incompatible() {
        let mut bytes = Checkpoint::new().to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Incompatible { .. })
        ));
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        rng.set_stream(3);
        for _ in 0..13 {
            rng.next_u32();
        }
        let mut c = Checkpoint::new();
        c.put_rng("r", &rng);
        let mut back = Checkpoint::from_bytes(&c.to_bytes()).unwrap().rng("r").unwrap();
        for _ in 0..50 {
            assert_eq!(back.next_u64(), rng.next_u64());
        }
    }

    #[test]
    fn agent_roundtrip_is_bit_exact_and_resumes_identically() {
        let buf = buffer();
        let mut a = small_agent(true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let b = buf.sample_nstep(4, 3, 0.99, &mut rng).unwrap();
            a.critic_update(&b, TargetPolicy::Dataset).unwrap();
            a.actor_update(&b).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.ckpt");
        save_checkpoint(&a, &path).unwrap();
        let mut b = load_checkpoint(&path).unwrap();
        assert_eq!(b.encoder, a.encoder);
        assert_eq!(b.target_critic, a.target_critic);
        assert_eq!(b.critic_opt, a.critic_opt);
        assert_eq!(b.dual, a.dual);
        assert_eq!(b.rngs, a.rngs);
        let mut rng_b = rng.clone();
        for _ in 0..3 {
            let x = buf.sample_nstep(4, 3, 0.99, &mut rng).unwrap();
            let y = buf.sample_nstep(4, 3, 0.99, &mut rng_b).unwrap();
            let sa = a.critic_update(&x, TargetPolicy::Dataset).unwrap();
            let sb = b.critic_update(&y, TargetPolicy::Dataset).unwrap();
            assert_eq!(sa.td_loss.to_bits(), sb.td_loss.to_bits());
            assert_eq!(sa.nd_measurement, sb.nd_measurement);
        }
        assert_eq!(a.critic, b.critic);
    }

    #[test]
    fn replay_roundtrip_keeps_sampling_identical() {
        let mut buf = buffer();
        buf.end_episode();
        let mut c = Checkpoint::new();
        c.put_replay("r", &buf);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap().replay("r").unwrap();
        assert_eq!(back, buf);
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = r1.clone();
        let a = buf.sample_nstep(6, 3, 0.9, &mut r1).unwrap();
        let b = back.sample_nstep(6, 3, 0.9, &mut r2).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.obs, b.obs);
    }

    #[test]
    fn corrupt_agent_file_loads_nothing() {
        let a = small_agent(false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.ckpt");
        save_checkpoint(&a, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }
}

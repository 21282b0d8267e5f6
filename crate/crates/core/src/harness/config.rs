use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::rl::AgentConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Online,
    #[default]
    OfflineEval,
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: Mode,
    pub name: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Save a checkpoint every this many training steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Stop after this many training steps of the current phase, leaving a
    /// checkpoint behind. Used to split a run across invocations.
    pub stop_after: Option<usize>,
    /// Checkpoint whose encoder initialises the agent.
    pub encoder_from: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: Mode::OfflineEval,
            name: "run".into(),
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
            stop_after: None,
            encoder_from: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineSection {
    /// Random-policy transitions collected before training.
    pub dataset_size: usize,
    pub eval_steps: usize,
    pub improvement_steps: usize,
    /// Fixed transitions on which diagnostics are computed.
    pub diag_batch: usize,
}

impl Default for OfflineSection {
    fn default() -> Self {
        Self {
            dataset_size: 15_000,
            eval_steps: 10_000,
            improvement_steps: 5_000,
            diag_batch: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineSection {
    pub total_steps: usize,
    /// Uniformly random actions before learning starts.
    pub seed_steps: usize,
    pub buffer_capacity: usize,
    pub noise_start: f64,
    pub noise_end: f64,
    /// Fraction of training over which the exploration noise decays.
    pub noise_decay_fraction: f64,
}

impl Default for OnlineSection {
    fn default() -> Self {
        Self {
            total_steps: 20_000,
            seed_steps: 1_000,
            buffer_capacity: 100_000,
            noise_start: 0.3,
            noise_end: 0.1,
            noise_decay_fraction: 0.5,
        }
    }
}

impl OnlineSection {
    /// Linearly decayed exploration scale at `step`.
    pub fn noise_at(&self, step: usize) -> f64 {
        let horizon = (self.total_steps as f64 * self.noise_decay_fraction).max(1.0);
        let t = (step as f64 / horizon).min(1.0);
        self.noise_start + (self.noise_end - self.noise_start) * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub samples: usize,
    pub n_probes: usize,
    pub amplitudes: Vec<f64>,
    /// Checkpoint to probe; a freshly initialised agent otherwise.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            samples: 128,
            n_probes: 8,
            amplitudes: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Training steps between metrics rows.
    pub cadence: usize,
    pub eval_episodes: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            cadence: 250,
            eval_episodes: 10,
        }
    }
}

/// Everything one experiment needs; serialized next to its outputs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub offline: OfflineSection,
    pub online: OnlineSection,
    pub probe: ProbeSection,
    pub metrics: MetricsSection,
}

fn usage(field: &str, message: impl Into<String>) -> Error {
    Error::Usage {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("offline.dataset_size", self.offline.dataset_size),
            ("offline.diag_batch", self.offline.diag_batch),
            ("online.total_steps", self.online.total_steps),
            ("online.buffer_capacity", self.online.buffer_capacity),
            ("probe.samples", self.probe.samples),
            ("probe.n_probes", self.probe.n_probes),
            ("metrics.cadence", self.metrics.cadence),
            ("metrics.eval_episodes", self.metrics.eval_episodes),
            ("agent.batch_size", self.agent.batch_size),
            ("agent.n_step", self.agent.n_step),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(usage(field, "must be positive"));
            }
        }
        if self.run.seeds.is_empty() {
            return Err(usage("run.seeds", "at least one seed is required"));
        }
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return Err(usage("run.name", "must be a non-empty plain name"));
        }
        if self.probe.amplitudes.is_empty() {
            return Err(usage("probe.amplitudes", "at least one amplitude is required"));
        }
        let o = &self.online;
        if !(o.noise_start >= 0.0 && o.noise_end >= 0.0 && (0.0..=1.0).contains(&o.noise_decay_fraction)) {
            return Err(usage(
                "online",
                "noise scales must be non-negative and the decay fraction in [0, 1]",
            ));
        }
        if o.seed_steps >= o.total_steps {
            return Err(usage("online.seed_steps", "must be smaller than online.total_steps"));
        }
        self.env.validate().map_err(|e| usage("env", e.to_string()))?;
        let n = self.env.image_size;
        let e = &self.agent.encoder;
        if !self.agent.proprioceptive && (e.channels_in != self.env.frame_stack || e.input_size != (n, n)) {
            return Err(usage(
                "agent.encoder",
                format!(
                    "encoder expects {}×{:?} but the environment renders {}×({n}, {n})",
                    e.channels_in, e.input_size, self.env.frame_stack
                ),
            ));
        }
        if self.agent.action_dim != 2 || self.agent.proprio_dim != 6 {
            return Err(usage("agent", "dot-reacher has 2 action and 6 proprio dimensions"));
        }
        match self.agent.validate() {
            Err(Error::Usage { field, message }) => Err(Error::Usage { field, message }),
            Err(other) => Err(usage("agent", other.to_string())),
            Ok(()) => Ok(()),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, applies `key.path=value` overrides on top, and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| usage("<file>", e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| usage("<config>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }
}

/// Sets one dotted key. The value is read as TOML (numbers, booleans, arrays,
/// quoted strings) and falls back to a bare string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(assignment, "overrides take the form key.path=value"))?;
    let key = key.trim();
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(usage(key, "empty path segment"));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| usage(key, format!("`{p}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.offline.dataset_size, 15_000);
    }

    #[test]
    fn overrides_beat_file_values() {
        let text = "[run]\nseeds = [1, 2]\n[agent]\nn_step = 5\n";
        let cfg = ExperimentConfig::from_toml_with_overrides(
            text,
            &[
                "agent.n_step=7".into(),
                "run.name=abc".into(),
                "agent.use_lix=true".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.agent.n_step, 7);
        assert_eq!(cfg.run.seeds, vec![1, 2]);
        assert_eq!(cfg.run.name, "abc");
        assert!(cfg.agent.use_lix);
    }

    #[test]
    fn errors_name_the_field() {
        let err = ExperimentConfig::from_toml_str("[metrics]\ncadence = 0\n").unwrap_err();
        assert!(
            matches!(err, Error::Usage { ref field, .. } if field == "metrics.cadence"),
            "{err}"
        );
        let err = ExperimentConfig::from_toml_str("[agent]\nproprioceptive = true\nuse_lix = true\n").unwrap_err();
        assert!(
            matches!(err, Error::Usage { ref field, .. } if field == "agent.proprioceptive"),
            "{err}"
        );
        assert!(ExperimentConfig::from_toml_str("[run]\nbogus = 1\n").is_err());
        for nested in [
            "agent.bogus=1",
            "agent.dual.bogus=1",
            "agent.encoder.bogus=1",
            "agent.nd.bogus=1",
            "env.bogus=1",
        ] {
            assert!(
                ExperimentConfig::from_toml_with_overrides("", &[nested.into()]).is_err(),
                "{nested}"
            );
        }
        assert!(ExperimentConfig::from_toml_with_overrides("", &["novalue".into()]).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn noise_schedule_decays_linearly() {
        let o = OnlineSection {
            total_steps: 100,
            ..OnlineSection::default()
        };
        assert_eq!(o.noise_at(0), 0.3);
        assert!((o.noise_at(25) - 0.2).abs() < 1e-12);
        assert!((o.noise_at(50) - 0.1).abs() < 1e-12);
        assert!((o.noise_at(90) - 0.1).abs() < 1e-12);
    }
}

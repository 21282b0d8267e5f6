//! Multi-arm sweeps: a base config plus per-arm overrides, one experiment
//! directory per arm.

use super::config::{apply_override, ExperimentConfig};
use super::run::{run_experiment, ExperimentSummary, CHECKPOINT_FILE};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub name: String,
    /// `key.path=value` overrides applied on top of the base config.
    #[serde(default)]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Named arm list to start from (`ablation`).
    pub preset: Option<String>,
    /// Extra arms appended after the preset.
    pub arms: Vec<Arm>,
}

fn arm(name: &str, set: &[&str]) -> Arm {
    Arm {
        name: name.into(),
        set: set.iter().map(|s| s.to_string()).collect(),
    }
}

/// The seven offline ablation rows. The pretrained-frozen row reuses the
/// encoder trained by the augmented row for the same seed, so order matters.
pub fn ablation_arms(output_dir: &str) -> Vec<Arm> {
    let pretrained = format!("run.encoder_from=\"{output_dir}/augmented/seed-{{seed}}/{CHECKPOINT_FILE}\"");
    vec![
        arm("augmented", &["agent.use_shift_aug=true"]),
        arm("non-augmented", &[]),
        arm("proprioceptive", &["agent.proprioceptive=true"]),
        arm("frozen-random", &["agent.freeze_encoder=true"]),
        arm("frozen-pretrained", &["agent.freeze_encoder=true", &pretrained]),
        arm("norm-r", &["agent.reward_normalize=true"]),
        arm("ten-step", &["agent.n_step=10"]),
    ]
}

pub fn preset_arms(name: &str, output_dir: &str) -> Result<Vec<Arm>> {
    match name {
        "ablation" => Ok(ablation_arms(output_dir)),
        other => Err(Error::Usage {
            field: "sweep.preset".into(),
            message: format!("unknown preset `{other}` (known: ablation)"),
        }),
    }
}

/// Resolves a sweep file into one validated config per arm. Precedence is
/// flag > arm > file > default; every arm writes under `run.output_dir/<arm>`.
pub fn expand_sweep(text: &str, preset: Option<&str>, overrides: &[String]) -> Result<Vec<ExperimentConfig>> {
    let usage = |e: String| Error::Usage {
        field: "<file>".into(),
        message: e,
    };
    let mut base: toml::Table = toml::from_str(text).map_err(|e| usage(e.to_string()))?;
    let section: SweepSection = match base.remove("sweep") {
        Some(v) => v.try_into().map_err(|e: toml::de::Error| Error::Usage {
            field: "sweep".into(),
            message: e.to_string(),
        })?,
        None => SweepSection::default(),
    };
    // Resolve the output directory first so preset paths can refer to it.
    let probe = ExperimentConfig::from_toml_with_overrides(&toml::to_string(&base).expect("table"), overrides)?;
    let out = probe.run.output_dir.to_string_lossy().to_string();
    let mut arms = match preset.or(section.preset.as_deref()) {
        Some(p) => preset_arms(p, &out)?,
        None => Vec::new(),
    };
    arms.extend(section.arms);
    if arms.is_empty() {
        return Err(Error::Usage {
            field: "sweep.arms".into(),
            message: "a sweep needs a preset or at least one arm".into(),
        });
    }
    let mut seen = std::collections::BTreeSet::new();
    arms.iter()
        .map(|a| {
            if !seen.insert(a.name.clone()) {
                return Err(Error::Usage {
                    field: "sweep.arms".into(),
                    message: format!("duplicate arm `{}`", a.name),
                });
            }
            let mut table = base.clone();
            for s in &a.set {
                apply_override(&mut table, s)?;
            }
            apply_override(&mut table, &format!("run.name=\"{}\"", a.name))?;
            let cfg = ExperimentConfig::from_toml_with_overrides(&toml::to_string(&table).expect("table"), overrides)?;
            Ok(ExperimentConfig {
                run: super::config::RunSection {
                    name: a.name.clone(),
                    ..cfg.run.clone()
                },
                ..cfg
            })
        })
        .collect()
}

/// Runs every arm in order and writes `sweep.json` with the per-arm summaries.
pub fn run_sweep(configs: &[ExperimentConfig], resume: bool) -> Result<Vec<ExperimentSummary>> {
    let mut out = Vec::with_capacity(configs.len());
    for cfg in configs {
        log::info!("sweep arm {}", cfg.run.name);
        out.push(run_experiment(cfg, resume)?);
    }
    if let Some(first) = configs.first() {
        let path = first.run.output_dir.join("sweep.json");
        std::fs::write(path, serde_json::to_string_pretty(&out).expect("serializable") + "\n")?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_expands_to_seven_arms() {
        let text = "[run]\noutput_dir = \"out\"\nseeds = [0, 1, 2]\n[sweep]\npreset = \"ablation\"\n";
        let cfgs = expand_sweep(text, None, &[]).unwrap();
        let names: Vec<&str> = cfgs.iter().map(|c| c.run.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "augmented",
                "non-augmented",
                "proprioceptive",
                "frozen-random",
                "frozen-pretrained",
                "norm-r",
                "ten-step"
            ]
        );
        assert!(cfgs[0].agent.use_shift_aug);
        assert!(cfgs[2].agent.proprioceptive);
        assert!(cfgs[4].agent.freeze_encoder);
        assert_eq!(
            cfgs[4].run.encoder_from.as_deref(),
            Some(std::path::Path::new("out/augmented/seed-{seed}/checkpoint.bin"))
        );
        assert!(cfgs[5].agent.reward_normalize);
        assert_eq!(cfgs[6].agent.n_step, 10);
        assert_eq!(
            cfgs[1],
            ExperimentConfig {
                run: super::super::config::RunSection {
                    name: "non-augmented".into(),
                    output_dir: "out".into(),
                    seeds: vec![0, 1, 2],
                    ..Default::default()
                },
                ..Default::default()
            }
        );
    }

    #[test]
    fn custom_arms_and_flag_precedence() {
        let text = "[agent]\nn_step = 4\n[[sweep.arms]]\nname = \"alix\"\nset = [\"agent.use_lix=true\", \"agent.n_step=2\"]\n";
        let cfgs = expand_sweep(text, Some("ablation"), &["agent.n_step=6".into()]).unwrap();
        assert_eq!(cfgs.len(), 8);
        let alix = cfgs.last().unwrap();
        assert!(alix.agent.use_lix);
        assert!(cfgs.iter().all(|c| c.agent.n_step == 6));
    }

    #[test]
    fn bad_sweeps_are_usage_errors() {
        assert!(matches!(expand_sweep("", None, &[]), Err(Error::Usage { .. })));
        assert!(expand_sweep("", Some("nope"), &[]).is_err());
        let dup = "[[sweep.arms]]\nname = \"a\"\n[[sweep.arms]]\nname = \"a\"\n";
        assert!(expand_sweep(dup, None, &[]).is_err());
    }
}

//! `alix` command line: train, offline, probe, plot and sweep.
//!
//! Settings resolve as flag > config file > built-in default. Any config field
//! can be set from the command line with `--set section.key=value`.

use alix::error::Error;
use alix::harness::{self, ExperimentConfig, Mode};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "alix",
    version,
    about = "Pixel-based TD learning with adaptive local signal mixing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML config file; omitted fields take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory (run.output_dir).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds (run.seeds).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Run name (run.name).
    #[arg(long)]
    name: Option<String>,
    /// Override any field, e.g. `--set agent.use_lix=true`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from checkpoint.bin where one exists.
    #[arg(long)]
    resume: bool,
}

impl RunArgs {
    /// Explicit flags become overrides applied after the file and `--set`.
    fn overrides(&self, mode: Option<&str>) -> Vec<String> {
        let mut o = self.set.clone();
        if let Some(m) = mode {
            o.push(format!("run.mode=\"{m}\""));
        }
        if let Some(out) = &self.out {
            o.push(format!("run.output_dir={}", toml_string(&out.to_string_lossy())));
        }
        if !self.seeds.is_empty() {
            let list: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
            o.push(format!("run.seeds=[{}]", list.join(",")));
        }
        if let Some(n) = &self.name {
            o.push(format!("run.name={}", toml_string(n)));
        }
        o
    }

    fn text(&self) -> Result<String, Error> {
        match &self.config {
            Some(p) => Ok(std::fs::read_to_string(p)?),
            None => Ok(String::new()),
        }
    }

    fn load(&self, mode: Option<&str>) -> Result<ExperimentConfig, Error> {
        ExperimentConfig::from_toml_with_overrides(&self.text()?, &self.overrides(mode))
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.into()).to_string()
}

#[derive(Subcommand)]
enum Command {
    /// Online training in the dot-reacher environment.
    Train(RunArgs),
    /// Offline evaluation on random-policy data, then policy improvement.
    Offline(RunArgs),
    /// Encoder sensitivity probes (Jacobian norm, checkerboard curve).
    Probe {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to probe (probe.checkpoint); `{seed}` is substituted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render metrics columns from a metrics.csv as an SVG line chart.
    Plot {
        csv: PathBuf,
        /// Comma-separated column names.
        #[arg(short = 'C', long, value_delimiter = ',', required = true)]
        columns: Vec<String>,
        /// Output SVG path (defaults to the CSV path with an .svg extension).
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        title: Option<String>,
    },
    /// Run several arms of one base config; see the [sweep] config section.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Named arm list (`ablation`).
        #[arg(long)]
        preset: Option<String>,
        /// Print the resolved arm configs without running them.
        #[arg(long)]
        dry_run: bool,
    },
}

fn report(summary: &harness::ExperimentSummary) {
    for s in &summary.seeds {
        match (&s.error, s.return_mean) {
            (Some(e), _) => println!("{} seed {}: failed: {e}", summary.name, s.seed),
            (None, Some(m)) => println!(
                "{} seed {}: return {m:.3} ± {:.3} over {} episodes",
                summary.name,
                s.seed,
                s.return_std.unwrap_or(0.0),
                s.returns.len()
            ),
            (None, None) => println!("{} seed {}: {:?} at step {}", summary.name, s.seed, s.status, s.steps),
        }
    }
    if let (Some(m), Some(sd)) = (summary.return_mean, summary.return_std) {
        println!("{}: {m:.3} ± {sd:.3} across seeds", summary.name);
    }
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.load(Some("online"))?;
            let s = harness::run_experiment(&cfg, args.resume)?;
            report(&s);
            Ok(s.failed == 0)
        }
        Command::Offline(args) => {
            let cfg = args.load(Some("offline-eval"))?;
            let s = harness::run_experiment(&cfg, args.resume)?;
            report(&s);
            Ok(s.failed == 0)
        }
        Command::Probe { mut run, checkpoint } => {
            if let Some(c) = checkpoint {
                run.set
                    .push(format!("probe.checkpoint={}", toml_string(&c.to_string_lossy())));
            }
            let cfg = run.load(Some("probe"))?;
            debug_assert_eq!(cfg.run.mode, Mode::Probe);
            let s = harness::run_experiment(&cfg, false)?;
            for seed in &cfg.run.seeds {
                let path = harness::seed_dir(&cfg, *seed).join(harness::run::PROBE_FILE);
                if let Ok(text) = std::fs::read_to_string(&path) {
                    println!("{}", text.trim_end());
                }
            }
            Ok(s.failed == 0)
        }
        Command::Plot {
            csv,
            columns,
            out,
            title,
        } => {
            let rows = harness::read_metrics_file(&csv)?;
            let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
            let title = title.unwrap_or_else(|| csv.display().to_string());
            let svg = harness::render_plot(&rows, &cols, &title)?;
            let out = out.unwrap_or_else(|| csv.with_extension("svg"));
            std::fs::write(&out, svg)?;
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Sweep { run, preset, dry_run } => {
            let text = run.text()?;
            let cfgs = harness::expand_sweep(&text, preset.as_deref(), &run.overrides(None))?;
            if dry_run {
                for c in &cfgs {
                    println!("{}", c.to_json());
                }
                return Ok(true);
            }
            let summaries = harness::run_sweep(&cfgs, run.resume)?;
            summaries.iter().for_each(report);
            Ok(summaries.iter().all(|s| s.failed == 0))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Usage { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

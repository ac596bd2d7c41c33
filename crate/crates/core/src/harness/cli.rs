//! Command-line interface: gen-data, train, eval, ablate, report.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::ablate::ablate;
use super::checkpoint::load_checkpoint;
use super::config::{parse_mode, RunConfig};
use super::dataset::{generate_to_disk, obtain_split, Split};
use super::eval::{check_arch, evaluate, evaluate_baseline};
use super::report::{comparison_table, loss_curve_svg, render_text, write_eval_outputs};
use super::train::{train, TrainRecord};
use super::HarnessError;

#[derive(Parser)]
#[command(
    name = "rwm",
    about = "Residual BEV world model: synthetic data, training, evaluation, ablations"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set model.dim=32.
    #[arg(long = "set", value_parser = parse_kv)]
    set: Vec<(String, String)>,
    /// Run seed override.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, HarnessError> {
        match &self.config {
            Some(path) => RunConfig::load(path, &self.set, self.seed),
            None => RunConfig::from_toml("", &self.set, self.seed),
        }
    }
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got '{s}'"))
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train and eval episode splits to disk.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output dataset directory (defaults to <out_dir>/data).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint plus training log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Coupling mode override (tight | semi | decoupled).
        #[arg(long)]
        mode: Option<String>,
        /// Evaluate the copy-last-frame / constant-velocity baseline
        /// instead of a model.
        #[arg(long, default_value_t = false)]
        baseline: bool,
    },
    /// Run the ablation grid from the config's [ablate] section.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render reports: compare metrics.json files and plot loss curves.
    Report {
        /// Run directories holding metrics.json.
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
        /// Training log to plot.
        #[arg(long)]
        loss_curve: Option<PathBuf>,
        /// SVG output path for the loss curve.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

/// Entry point; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // Clap renders its own usage; preserve its exit semantics.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Cmd::GenData { cfg, dir } => {
            let cfg = cfg.load()?;
            let dir = dir.unwrap_or_else(|| cfg.out_dir.join("data"));
            let (train_hash, eval_hash) = generate_to_disk(&cfg, &dir)?;
            println!(
                "wrote {} train / {} eval episodes to {} (hashes {train_hash:016x} / {eval_hash:016x})",
                cfg.data.train_episodes,
                cfg.data.eval_episodes,
                dir.display()
            );
            Ok(())
        }
        Cmd::Train { cfg } => {
            let cfg = cfg.load()?;
            let outcome = train(&cfg)?;
            let k = 20;
            println!(
                "trained {} steps; smoothed loss {:.4} -> {:.4}; checkpoint {}",
                outcome.records.len(),
                outcome.smoothed_first(k),
                outcome.smoothed_last(k),
                outcome.checkpoint.display()
            );
            Ok(())
        }
        Cmd::Eval {
            cfg,
            checkpoint,
            mode,
            baseline,
        } => {
            let cfg_local = cfg.load()?;
            if baseline {
                let eval_split = obtain_split(&cfg_local, Split::Eval)?;
                let report = evaluate_baseline(&cfg_local, &eval_split.episodes)?;
                let dir = cfg_local.out_dir.join("baseline");
                write_eval_outputs(&dir, &report, None, cfg_local.config_hash())?;
                print!("{}", render_text(&report, None));
                return Ok(());
            }
            let ckpt = load_checkpoint(&checkpoint)?;
            // Evaluate under the checkpoint's own configuration, allowing a
            // coupling-mode override only if the architecture agrees.
            let mut eval_cfg = ckpt.config.clone();
            eval_cfg.out_dir = cfg_local.out_dir.clone();
            let mode = match mode {
                Some(m) => parse_mode(&m)?,
                None => eval_cfg.plan.mode,
            };
            // The planning head's shape depends on the coupling mode, so a
            // checkpoint only evaluates in the mode it was trained for.
            if mode != eval_cfg.plan.mode {
                return Err(HarnessError::Config(format!(
                    "checkpoint was trained for mode '{}'; cannot evaluate as '{}'",
                    eval_cfg.plan.mode.as_str(),
                    mode.as_str()
                )));
            }
            check_arch(&eval_cfg, &ckpt)?;
            let eval_split = obtain_split(&eval_cfg, Split::Eval)?;
            let out = evaluate(&eval_cfg, &ckpt.store, &eval_split.episodes, mode)?;
            let dir = eval_cfg.out_dir.join(format!("eval_{}", mode.as_str()));
            write_eval_outputs(&dir, &out.report, Some(&out.latency), eval_cfg.config_hash())?;
            print!("{}", render_text(&out.report, Some(&out.latency)));
            Ok(())
        }
        Cmd::Ablate { cfg } => {
            let cfg = cfg.load()?;
            let spec = cfg.ablate.clone().ok_or_else(|| {
                HarnessError::Config("config has no [ablate] section".into())
            })?;
            let cells = ablate(&cfg, &spec)?;
            println!(
                "{}",
                std::fs::read_to_string(cfg.out_dir.join("ablation_table.txt"))?
            );
            println!("{} cells written under {}", cells.len(), cfg.out_dir.display());
            Ok(())
        }
        Cmd::Report {
            runs,
            loss_curve,
            svg,
        } => {
            if runs.is_empty() && loss_curve.is_none() {
                return Err(HarnessError::Config(
                    "report needs --run directories or --loss-curve".into(),
                ));
            }
            let mut rows = Vec::new();
            for dir in &runs {
                let text = std::fs::read_to_string(dir.join("metrics.json"))?;
                let payload: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| HarnessError::Config(format!("bad metrics.json: {e}")))?;
                let metrics: crate::metrics::MetricReport =
                    serde_json::from_value(payload["metrics"].clone())
                        .map_err(|e| HarnessError::Config(format!("bad metrics.json: {e}")))?;
                rows.push((dir.display().to_string(), metrics));
            }
            if !rows.is_empty() {
                print!("{}", comparison_table(&rows));
            }
            if let Some(log_path) = loss_curve {
                let text = std::fs::read_to_string(&log_path)?;
                let records: Vec<TrainRecord> = text
                    .lines()
                    .filter_map(|l| serde_json::from_str::<TrainRecord>(l).ok())
                    .collect();
                let out = svg.unwrap_or_else(|| log_path.with_extension("svg"));
                std::fs::write(&out, loss_curve_svg(&records))?;
                println!("loss curve written to {}", out.display());
            }
            Ok(())
        }
    }
}

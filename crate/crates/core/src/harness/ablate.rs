//! Ablation grids: one train+eval run per (variant, seed) cell with shared
//! data seeds, consolidated into a comparison table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::MetricReport;

use super::checkpoint::load_checkpoint;
use super::config::{AblateConfig, RunConfig};
use super::dataset::{obtain_split, Split};
use super::eval::{evaluate, EvalLatency};
use super::report::{comparison_table, write_eval_outputs};
use super::train::train;
use super::HarnessError;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblateCell {
    pub variant: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub metrics: MetricReport,
    pub latency: EvalLatency,
}

/// Applies a variant's dotted-path overrides onto a base config.
pub fn apply_variant(
    base: &RunConfig,
    overrides: &std::collections::BTreeMap<String, String>,
    seed: u64,
    out_dir: &Path,
) -> Result<RunConfig, HarnessError> {
    let text = toml::to_string(base).map_err(|e| HarnessError::Config(e.to_string()))?;
    let kv: Vec<(String, String)> = overrides
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let mut cfg = RunConfig::from_toml(&text, &kv, Some(seed))?;
    cfg.out_dir = out_dir.to_path_buf();
    cfg.ablate = None;
    Ok(cfg)
}

/// Runs the full grid. Every cell for one seed shares the same dataset
/// (same data seed); the consolidated table and per-cell reports land under
/// `base.out_dir`.
pub fn ablate(base: &RunConfig, spec: &AblateConfig) -> Result<Vec<AblateCell>, HarnessError> {
    if spec.variants.is_empty() || spec.seeds.is_empty() {
        return Err(HarnessError::Config(
            "ablation needs at least one variant and one seed".into(),
        ));
    }
    std::fs::create_dir_all(&base.out_dir)?;
    let mut cells = Vec::with_capacity(spec.variants.len() * spec.seeds.len());
    for &seed in &spec.seeds {
        for variant in &spec.variants {
            let cell_dir = base.out_dir.join(format!("{}_s{seed}", variant.name));
            let cfg = apply_variant(base, &variant.overrides, seed, &cell_dir)?;
            let outcome = train(&cfg)?;
            let ckpt = load_checkpoint(&outcome.checkpoint)?;
            let eval_split = obtain_split(&cfg, Split::Eval)?;
            let out = evaluate(&cfg, &ckpt.store, &eval_split.episodes, cfg.plan.mode)?;
            write_eval_outputs(&cell_dir, &out.report, Some(&out.latency), cfg.config_hash())?;
            cells.push(AblateCell {
                variant: variant.name.clone(),
                seed,
                dataset_hash: format!("{:016x}", outcome.dataset_hash),
                metrics: out.report,
                latency: out.latency,
            });
        }
    }
    let rows: Vec<(String, MetricReport)> = cells
        .iter()
        .map(|c| (format!("{}_s{}", c.variant, c.seed), c.metrics.clone()))
        .collect();
    std::fs::write(base.out_dir.join("ablation_table.txt"), comparison_table(&rows))?;
    std::fs::write(
        base.out_dir.join("ablation_summary.json"),
        serde_json::to_string_pretty(&cells).unwrap(),
    )?;
    Ok(cells)
}

//! Run configuration: TOML file plus dotted-path overrides, validation,
//! and configuration hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gridworld::{GeneratorParams, WorldConfig};
use crate::heads::{CostConfig, SamplerConfig};
use crate::model::{CouplingMode, ModelConfig};
use crate::rng::fnv1a;

use super::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_plan: f64,
    pub lambda_coll: f64,
    /// Temporal self-supervision on predicted states (off by default).
    pub tss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_plan: 1.0,
            lambda_coll: 1.0,
            tss: false,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> crate::objectives::LossWeights {
        crate::objectives::LossWeights {
            lambda_plan: self.lambda_plan,
            lambda_coll: self.lambda_coll,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    /// Fraction of training under teacher forcing before scheduled
    /// sampling ramps in.
    pub tf_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 5e-3,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            steps: 200,
            batch: 6,
            tf_fraction: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FootprintConfig {
    pub length_m: f64,
    pub width_m: f64,
}

impl Default for FootprintConfig {
    fn default() -> Self {
        FootprintConfig {
            length_m: 4.0,
            width_m: 2.0,
        }
    }
}

impl FootprintConfig {
    pub fn footprint(&self) -> crate::footprint::Footprint {
        crate::footprint::Footprint {
            length_m: self.length_m,
            width_m: self.width_m,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub mode: CouplingMode,
    pub sampler: SamplerConfig,
    pub cost: CostConfig,
    pub footprint: FootprintConfig,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            mode: CouplingMode::Semi,
            sampler: SamplerConfig::default(),
            cost: CostConfig::default(),
            footprint: FootprintConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_episodes: usize,
    pub eval_episodes: usize,
    /// Episode directory; generated under the output directory when unset.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_episodes: 500,
            eval_episodes: 100,
            dir: None,
        }
    }
}

/// One ablation grid cell: a name plus dotted-path config overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateVariant {
    pub name: String,
    #[serde(default)]
    pub overrides: std::collections::BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<AblateVariant>,
    pub seeds: Vec<u64>,
}

/// Complete run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Grid preset applied before the [world] section: "desk" (default) or
    /// "full_scale".
    pub preset: Option<String>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub world: WorldConfig,
    pub gen: GeneratorParams,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub plan: PlanConfig,
    pub data: DataConfig,
    pub ablate: Option<AblateConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: None,
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            world: WorldConfig::default(),
            gen: GeneratorParams::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            plan: PlanConfig::default(),
            data: DataConfig::default(),
            ablate: None,
        }
    }
}

impl RunConfig {
    /// Parses a TOML document, then applies dotted-path overrides and the
    /// optional seed override. Unknown keys anywhere are rejected.
    pub fn from_toml(
        text: &str,
        overrides: &[(String, String)],
        seed: Option<u64>,
    ) -> Result<RunConfig, HarnessError> {
        let mut value: toml::Value = text
            .parse()
            .map_err(|e| HarnessError::Config(format!("config parse error: {e}")))?;
        for (path, raw) in overrides {
            set_path(&mut value, path, raw)?;
        }
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e| HarnessError::Config(format!("config error: {e}")))?;
        if let Some(preset) = cfg.preset.clone() {
            cfg.apply_preset(&preset)?;
            // Re-apply world overrides on top of the preset.
            let mut value: toml::Value = text
                .parse()
                .map_err(|e| HarnessError::Config(format!("config parse error: {e}")))?;
            for (path, raw) in overrides {
                set_path(&mut value, path, raw)?;
            }
            if let Some(world) = value.get("world") {
                apply_world_partial(&mut cfg.world, world)?;
            }
        }
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        if let Ok(root) = std::env::var("RWM_OUT_ROOT") {
            if !root.is_empty() {
                cfg.out_dir = Path::new(&root).join(&cfg.out_dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(
        path: &Path,
        overrides: &[(String, String)],
        seed: Option<u64>,
    ) -> Result<RunConfig, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides, seed)
    }

    fn apply_preset(&mut self, preset: &str) -> Result<(), HarnessError> {
        match preset {
            "desk" => {}
            "full_scale" => self.world = WorldConfig::full_scale(),
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown preset '{other}' (expected 'desk' or 'full_scale')"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.world
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.model
            .validate()
            .map_err(HarnessError::Config)?;
        self.loss
            .weights()
            .validate()
            .map_err(HarnessError::Config)?;
        if self.optim.steps == 0 || self.optim.batch == 0 {
            return Err(HarnessError::Config(
                "optim.steps and optim.batch must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.optim.tf_fraction) {
            return Err(HarnessError::Config(
                "optim.tf_fraction must lie in [0, 1]".into(),
            ));
        }
        if !(self.optim.lr.is_finite() && self.optim.lr >= 0.0) {
            return Err(HarnessError::Config("optim.lr must be >= 0".into()));
        }
        if self.data.train_episodes == 0 || self.data.eval_episodes == 0 {
            return Err(HarnessError::Config(
                "data.train_episodes and data.eval_episodes must be >= 1".into(),
            ));
        }
        if self.model.memory != self.world.h_past + 1 {
            // Allowed, but the encoder seeds the memory with h_past+1
            // states; a smaller memory silently drops the oldest.
            if self.model.memory > self.world.h_past + 1 {
                return Err(HarnessError::Config(format!(
                    "model.memory {} exceeds the {} encoder states available to seed it",
                    self.model.memory,
                    self.world.h_past + 1
                )));
            }
        }
        Ok(())
    }

    /// Hash of the semantic configuration (canonical JSON with output
    /// locations normalized away, so runs differing only in where they
    /// write are recognized as the same run).
    pub fn config_hash(&self) -> u64 {
        let mut canon = self.clone();
        canon.out_dir = PathBuf::new();
        canon.data.dir = None;
        let json = serde_json::to_string(&canon).expect("config serializes");
        fnv1a(json.as_bytes())
    }

    /// Hash over architecture-shape keys only; checkpoints refuse to load
    /// into a mismatching architecture.
    pub fn arch_hash(&self) -> u64 {
        let key = ArchKey {
            bev_h: self.world.bev_h,
            bev_w: self.world.bev_w,
            z_bins: self.world.z_bins,
            num_classes: self.world.num_classes,
            h_past: self.world.h_past,
            f_future: self.world.f_future,
            model: self.model.clone(),
            mode: self.plan.mode,
        };
        let json = serde_json::to_string(&key).expect("arch key serializes");
        fnv1a(json.as_bytes())
    }
}

#[derive(Serialize)]
struct ArchKey {
    bev_h: usize,
    bev_w: usize,
    z_bins: usize,
    num_classes: usize,
    h_past: usize,
    f_future: usize,
    model: ModelConfig,
    mode: CouplingMode,
}

/// Applies a `--set path.to.key=value` override onto the raw TOML value.
fn set_path(root: &mut toml::Value, path: &str, raw: &str) -> Result<(), HarnessError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("bad override path '{path}'")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| {
            HarnessError::Config(format!("override path '{path}' crosses a non-table"))
        })?;
        node = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    let table = node.as_table_mut().ok_or_else(|| {
        HarnessError::Config(format!("override path '{path}' crosses a non-table"))
    })?;
    table.insert(parts[parts.len() - 1].to_string(), parse_toml_scalar(raw));
    Ok(())
}

/// Interprets an override value: bool, integer, float, array, then string.
fn parse_toml_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if raw.starts_with('[') || raw.starts_with('{') {
        if let Ok(doc) = format!("v = {raw}").parse::<toml::Value>() {
            if let Some(v) = doc.get("v") {
                return v.clone();
            }
        }
    }
    toml::Value::String(raw.to_string())
}

fn apply_world_partial(world: &mut WorldConfig, value: &toml::Value) -> Result<(), HarnessError> {
    let merged: WorldConfig = {
        let mut base = toml::Value::try_from(world.clone())
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if let (Some(bt), Some(vt)) = (base.as_table_mut(), value.as_table()) {
            for (k, v) in vt {
                bt.insert(k.clone(), v.clone());
            }
        }
        base.try_into()
            .map_err(|e| HarnessError::Config(format!("world section: {e}")))?
    };
    *world = merged;
    Ok(())
}

/// Conditioning/coupling enum round trips for CLI parsing.
pub fn parse_mode(s: &str) -> Result<CouplingMode, HarnessError> {
    match s {
        "tight" => Ok(CouplingMode::Tight),
        "semi" => Ok(CouplingMode::Semi),
        "decoupled" => Ok(CouplingMode::Decoupled),
        other => Err(HarnessError::Config(format!(
            "unknown coupling mode '{other}'"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_document() {
        let cfg = RunConfig::from_toml("", &[], None).unwrap();
        assert_eq!(cfg.world.bev_h, 32);
        assert_eq!(cfg.optim.steps, 200);
        assert_eq!(cfg.plan.mode, CouplingMode::Semi);
    }

    #[test]
    fn partial_sections_and_overrides_apply() {
        let text = "seed = 3\n[world]\nbev_h = 16\nbev_w = 16\n";
        let cfg = RunConfig::from_toml(
            text,
            &[("model.dim".into(), "32".into()), ("optim.lr".into(), "0.001".into())],
            Some(11),
        )
        .unwrap();
        assert_eq!(cfg.world.bev_h, 16);
        assert_eq!(cfg.model.dim, 32);
        assert_eq!(cfg.optim.lr, 0.001);
        assert_eq!(cfg.seed, 11);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[world]\nbogus = 1\n", &[], None).is_err());
        assert!(RunConfig::from_toml("", &[("bad.key".into(), "1".into())], None).is_err());
        assert!(RunConfig::from_toml("", &[("model.bogus".into(), "1".into())], None).is_err());
    }

    #[test]
    fn full_scale_preset_sets_grid() {
        let cfg = RunConfig::from_toml("preset = \"full_scale\"\n", &[], None).unwrap();
        assert_eq!((cfg.world.bev_h, cfg.world.bev_w, cfg.world.z_bins), (512, 512, 40));
        assert_eq!(cfg.world.cell_size, 0.2);
        // World keys specified alongside the preset win.
        let cfg = RunConfig::from_toml(
            "preset = \"full_scale\"\n[world]\nz_bins = 8\n",
            &[],
            None,
        )
        .unwrap();
        assert_eq!(cfg.world.z_bins, 8);
        assert_eq!(cfg.world.bev_h, 512);
    }

    #[test]
    fn hashes_track_architecture_keys_only() {
        let a = RunConfig::from_toml("", &[], None).unwrap();
        let mut b = a.clone();
        b.optim.lr = 0.123;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.arch_hash(), b.arch_hash());
        let mut c = a.clone();
        c.model.dim = 32;
        assert_ne!(a.arch_hash(), c.arch_hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(RunConfig::from_toml("[optim]\nsteps = 0\n", &[], None).is_err());
        assert!(RunConfig::from_toml("[model]\ndim = 30\nheads = 4\n", &[], None).is_err());
        assert!(RunConfig::from_toml("[model]\nmemory = 9\n", &[], None).is_err());
    }
}

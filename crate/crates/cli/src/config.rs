//! Run settings. Precedence: command-line flag, then config file, then the
//! defaults below. The resolved set is what a run manifest records.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mednet_core::gradcheck::GradCheckConfig;
use mednet_core::graph::Variant;
use mednet_core::train::TrainConfig;
use mednet_core::transfer::FreezePlan;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    /// Square input side length for models and loaded images.
    pub input_size: usize,
    /// Class count for synthetic data and for models built without data.
    pub classes: usize,
    pub per_class: usize,
    /// When false, synthetic classes differ by texture only.
    pub intensity_cue: bool,
    pub val_fraction: f64,
    pub freeze: FreezePlan,
    pub n_seeds: usize,
    pub train: TrainConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            variant: Variant::Gray,
            input_size: 64,
            classes: 8,
            per_class: 25,
            intensity_cue: true,
            val_fraction: 0.2,
            freeze: FreezePlan::None,
            n_seeds: 5,
            train: TrainConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

impl RunConfig {
    /// Defaults overlaid with a JSON file, which may hold a partial config
    /// or a previous run manifest (its `config` is reused).
    pub fn from_file(path: Option<&Path>) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let mut patch: Value =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            if patch.get("command").is_some() {
                if let Some(cfg) = patch.get_mut("config") {
                    patch = cfg.take();
                }
            }
            if !patch.is_object() {
                bail!("config file {} must hold a JSON object", path.display());
            }
            merge(&mut value, patch);
        }
        serde_json::from_value(value).context("invalid config")
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 32 || !self.input_size.is_multiple_of(16) {
            bail!("input_size must be a multiple of 16 and at least 32, got {}", self.input_size);
        }
        if self.classes < 2 {
            bail!("classes must be at least 2, got {}", self.classes);
        }
        if self.per_class == 0 {
            bail!("per_class must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            bail!("val_fraction must be in (0, 1), got {}", self.val_fraction);
        }
        self.train.validate()?;
        Ok(())
    }
}

//! Pipeline configuration: one TOML file drives every stage; command-line
//! flags override individual fields.
//!
//! Relative paths in `[paths]` resolve against the config file's directory
//! when `--config` is given, otherwise against the output directory, so a
//! generated `pipeline.toml` works from anywhere and stays byte-identical
//! across output directories.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mfp_core::bsfe::Pooling;
use mfp_core::ce_model::{Geometry, LogFormat};
use mfp_core::dimm_tree::TreeConfig;
use mfp_core::eval::EvalConfig;
use mfp_core::hierarchy::{FeaturizeConfig, ObservationWindowSet};
use mfp_core::patch_classifier::TrainConfig;
use mfp_core::synth::SynthConfig;
use mfp_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub ce_logs: Vec<PathBuf>,
    pub ce_format: LogFormat,
    pub failures: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            ce_logs: vec![PathBuf::from("ce_log.jsonl")],
            ce_format: LogFormat::CanonicalJsonl,
            failures: PathBuf::from("failures.csv"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturizeOptions {
    pub pooling: Vec<Pooling>,
    pub include_static_attrs: bool,
}

impl Default for FeaturizeOptions {
    fn default() -> Self {
        FeaturizeOptions {
            pooling: mfp_core::bsfe::default_pooling(),
            include_static_attrs: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub lead_s: i64,
    pub valid_s: i64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            lead_s: 900,
            valid_s: 7 * 24 * 3600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Master seed; copied into the generator and trainer configs.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Train/test boundary (epoch seconds): training uses data strictly
    /// before it, the test period is `[split_time, data_end)`.
    pub split_time: i64,
    pub data_end: i64,
    pub paths: PathsConfig,
    pub geometry: Geometry,
    pub windows: ObservationWindowSet,
    pub featurize: FeaturizeOptions,
    pub eval: EvalOptions,
    pub train: TrainConfig,
    pub tree: TreeConfig,
    pub synth: SynthConfig,
    pub sweep_leads_s: Vec<i64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let horizon = synth.horizon_s();
        PipelineConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            split_time: synth.start_time + horizon / 2,
            data_end: synth.start_time + horizon,
            paths: PathsConfig::default(),
            geometry: Geometry::default(),
            windows: ObservationWindowSet::default(),
            featurize: FeaturizeOptions::default(),
            eval: EvalOptions::default(),
            train: TrainConfig::default(),
            tree: TreeConfig::default(),
            synth,
            sweep_leads_s: mfp_core::eval::default_lead_grid(),
        }
    }
}

/// Flag overrides applied on top of the loaded file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub lead_s: Option<i64>,
    pub valid_s: Option<i64>,
    pub split_time: Option<i64>,
    pub data_end: Option<i64>,
    pub n_dimms: Option<usize>,
    pub fault_fraction: Option<f64>,
    pub horizon_days: Option<f64>,
    pub n_trees: Option<usize>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = toml::from_str(&raw)
            .map_err(|e| Error::config(format!("cannot parse config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Resolve relative input paths and a relative out_dir against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &PathBuf| -> PathBuf {
            if p.is_relative() {
                base.join(p)
            } else {
                p.clone()
            }
        };
        self.paths.ce_logs = self.paths.ce_logs.iter().map(&join).collect();
        self.paths.failures = join(&self.paths.failures);
        self.out_dir = join(&self.out_dir);
    }

    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.lead_s {
            self.eval.lead_s = v;
        }
        if let Some(v) = o.valid_s {
            self.eval.valid_s = v;
        }
        if let Some(v) = o.split_time {
            self.split_time = v;
        }
        if let Some(v) = o.data_end {
            self.data_end = v;
        }
        if let Some(v) = o.n_dimms {
            self.synth.n_dimms = v;
        }
        if let Some(v) = o.fault_fraction {
            self.synth.fault_fraction = v;
        }
        if let Some(v) = o.horizon_days {
            self.synth.horizon_days = v;
        }
        if let Some(v) = o.n_trees {
            self.train.n_trees = v;
        }
        // One master seed for every random component.
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.windows.validate()?;
        self.train.validate()?;
        self.tree.validate()?;
        if self.split_time >= self.data_end {
            return Err(Error::config(
                "split_time must lie strictly before data_end",
            ));
        }
        if self.eval.lead_s < 0 || self.eval.valid_s <= 0 {
            return Err(Error::config("invalid lead/validity window"));
        }
        if self.featurize.pooling.is_empty() {
            return Err(Error::config("at least one pooling method required"));
        }
        if self.sweep_leads_s.is_empty() || self.sweep_leads_s.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("sweep leads must be strictly increasing"));
        }
        Ok(())
    }

    pub fn featurize_config(&self) -> FeaturizeConfig {
        FeaturizeConfig {
            windows: self.windows.clone(),
            lead_s: self.eval.lead_s,
            valid_s: self.eval.valid_s,
            pooling: self.featurize.pooling.clone(),
            include_static_attrs: self.featurize.include_static_attrs,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            lead_s: self.eval.lead_s,
            valid_s: self.eval.valid_s,
            test_start: self.split_time,
            test_end: self.data_end,
        }
    }

    /// Everything that affects computed artifacts, with filesystem locations
    /// stripped: two runs into different directories must echo identically.
    pub fn semantic_echo(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "split_time": self.split_time,
            "data_end": self.data_end,
            "ce_format": self.paths.ce_format,
            "geometry": self.geometry,
            "windows": self.windows,
            "featurize": self.featurize,
            "eval": self.eval,
            "train": self.train,
            "tree": self.tree,
            "synth": self.synth,
            "sweep_leads_s": self.sweep_leads_s,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization is infallible")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let raw = cfg.to_toml();
        let parsed: PipelineConfig = toml::from_str(&raw).unwrap();
        assert_eq!(parsed, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn lead_override_changes_only_the_lead() {
        let mut a = PipelineConfig::default();
        let mut b = PipelineConfig::default();
        a.apply_overrides(&Overrides::default());
        b.apply_overrides(&Overrides {
            lead_s: Some(3600),
            ..Overrides::default()
        });
        let ea = a.semantic_echo();
        let eb = b.semantic_echo();
        assert_eq!(eb["eval"]["lead_s"], 3600);
        let mut ea_patched = ea.clone();
        ea_patched["eval"]["lead_s"] = 3600.into();
        assert_eq!(ea_patched, eb, "lead override must touch nothing else");
        assert_ne!(ea, eb);
    }

    #[test]
    fn relative_paths_resolve_against_base() {
        let mut cfg = PipelineConfig::default();
        cfg.resolve_paths(Path::new("/data/run1"));
        assert_eq!(cfg.paths.ce_logs[0], Path::new("/data/run1/ce_log.jsonl"));
        assert_eq!(cfg.out_dir, Path::new("/data/run1/out"));
    }

    #[test]
    fn unknown_format_tag_is_rejected_at_parse() {
        let raw = "[paths]\nce_format = \"parquet\"\n";
        assert!(toml::from_str::<PipelineConfig>(raw).is_err());
    }
}

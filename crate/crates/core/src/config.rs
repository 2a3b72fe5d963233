//! Experiment configuration: one TOML file with a section per module.
//! Missing keys take their defaults and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degradation::DegradationSpec;
use crate::error::{Error, Result};
use crate::losses::ExtractorConfig;
use crate::training::{LrStageConfig, SrStageConfig};

pub const RESOLVED_CONFIG_NAME: &str = "resolved_config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunConfig,
    pub data: DataConfig,
    pub lr_stage: LrStageConfig,
    pub synth: SynthConfig,
    pub sr_stage: SrStageConfig,
    pub degradation: DegradationSpec,
    pub model: ModelConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Single source of all randomness.
    pub seed: u64,
    pub out: PathBuf,
    pub device: String,
    /// Training checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            device: "cpu".into(),
            resume: None,
        }
    }
}

/// Dataset locations. Relative paths are resolved against `root`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    /// Clean high-resolution images (degradation-stage source domain and
    /// pair-synthesis input).
    pub clean_hr: PathBuf,
    /// Real-world low-resolution images (degradation-stage target domain).
    pub real_lr: PathBuf,
    /// Directory holding a synthesized pair manifest.
    pub pairs: PathBuf,
    /// Images for `infer` and `degrade`.
    pub input: PathBuf,
    pub eval_lr: PathBuf,
    pub eval_hr: PathBuf,
    /// Pair manifest used instead of `eval_lr`/`eval_hr` when set.
    pub eval_manifest: Option<PathBuf>,
    /// Decode every training image once up front.
    pub preload: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            clean_hr: "clean_hr".into(),
            real_lr: "real_lr".into(),
            pairs: "pairs".into(),
            input: "input".into(),
            eval_lr: "eval_lr".into(),
            eval_hr: "eval_hr".into(),
            eval_manifest: None,
            preload: false,
        }
    }
}

impl DataConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Bicubic,
    Classical,
    #[default]
    Learned,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub source: PairSource,
    /// Degradation-stage checkpoint for the learned source.
    pub lr_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Super-resolution checkpoint for `infer` and `evaluate`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub self_ensemble: bool,
    pub dataset_id: String,
    pub perceptual: ExtractorConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(read_table(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.device != "cpu" {
            return Err(Error::Config(format!("unsupported device {:?}; only \"cpu\" is available", self.run.device)));
        }
        self.lr_stage.validate()?;
        self.sr_stage.validate()?;
        self.degradation.validate().map_err(|e| Error::Config(e.to_string()))?;
        let s = self.sr_stage.generator.scale;
        if self.lr_stage.scale != s {
            return Err(Error::Config(format!(
                "lr_stage.scale {} differs from sr_stage.generator.scale {s}",
                self.lr_stage.scale
            )));
        }
        if self.synth.source == PairSource::Classical && self.degradation.scale != s {
            return Err(Error::Config(format!(
                "degradation.scale {} differs from sr_stage.generator.scale {s}",
                self.degradation.scale
            )));
        }
        Ok(())
    }

    /// Writes the snapshot next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_NAME);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

pub fn read_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    text.parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))
}

/// Applies `dotted.key=value`. The value is parsed as a TOML value and taken
/// as a plain string when that fails.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Every key of the default configuration with its default value, in file
/// order. Optional keys without a default are listed as `<unset>`.
pub fn default_keys() -> Vec<(String, String)> {
    fn walk(prefix: &str, t: &toml::Table, out: &mut Vec<(String, String)>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(sub) => walk(&key, sub, out),
                other => out.push((key, other.to_string())),
            }
        }
    }
    let table: toml::Table = Config::default().to_toml().parse().expect("default config parses");
    let mut out = Vec::new();
    walk("", &table, &mut out);
    for k in [
        "run.resume",
        "data.root",
        "data.eval_manifest",
        "synth.lr_checkpoint",
        "model.checkpoint",
        "degradation.jpeg_quality",
        "lr_stage.perceptual.weights",
        "sr_stage.perceptual.weights",
        "eval.perceptual.weights",
    ] {
        if !out.iter().any(|(key, _)| key == k) {
            out.push((k.to_string(), "<unset>".into()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(Config::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = Config::from_toml("[sr_stage]\nbatch_sise = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
        assert!(Config::from_toml("[nonsense]\n").is_err());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "sr_stage.generator.channels=8").unwrap();
        apply_override(&mut t, "run.out=some/dir").unwrap();
        apply_override(&mut t, "degradation.jpeg_quality=30").unwrap();
        let cfg = Config::from_table(t).unwrap();
        assert_eq!(cfg.sr_stage.generator.channels, 8);
        assert_eq!(cfg.run.out, PathBuf::from("some/dir"));
        assert_eq!(cfg.degradation.jpeg_quality, Some(30));
        assert!(apply_override(&mut toml::Table::new(), "nokey").is_err());
    }

    #[test]
    fn inconsistent_scales_are_rejected() {
        assert!(Config::from_toml("[lr_stage]\nscale = 2\n").is_err());
        assert!(Config::from_toml("[run]\ndevice = \"cuda\"\n").is_err());
    }

    #[test]
    fn key_listing_covers_nested_defaults() {
        let keys = default_keys();
        let find = |k: &str| keys.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
        assert_eq!(find("sr_stage.generator.channels").as_deref(), Some("64"));
        assert_eq!(find("lr_stage.schedule.base_lr").as_deref(), Some("0.0002"));
        assert_eq!(find("model.checkpoint").as_deref(), Some("<unset>"));
    }

    #[test]
    fn data_paths_resolve_against_root() {
        let d = DataConfig { root: Some("/data".into()), ..DataConfig::default() };
        assert_eq!(d.resolve(Path::new("x")), PathBuf::from("/data/x"));
        assert_eq!(d.resolve(Path::new("/abs")), PathBuf::from("/abs"));
    }
}

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sparsetrain::engine::clipstats::ClipStudyConfig;
use sparsetrain::engine::train::{Backend, TrainConfig};
use sparsetrain::fixedpoint::{FixedFormat, RoundingMode};
use sparsetrain::resources::DspPolicy;
use sparsetrain::topology::NetworkSpec;

/// Everything a command needs, read from one TOML file plus `--set` overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub network: NetworkSpec,
    #[serde(default)]
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub clip: ClipStudyConfig,
    #[serde(default)]
    pub trace: TraceConfig,
    #[serde(default)]
    pub estimate: EstimateConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the four IDX files, plain or gzipped.
    pub dir: PathBuf,
    /// Also report accuracy on the 10000-image test split. This goes beyond
    /// the rolling training-accuracy protocol and is labeled as such.
    #[serde(default)]
    pub held_out: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data/mnist"),
            held_out: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    pub block_cycles: u64,
    /// Uniform queue depth; the per-junction minimum when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_depth: Option<usize>,
    #[serde(default = "default_max_violations")]
    pub max_violations: usize,
}

fn default_max_violations() -> usize {
    16
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            block_cycles: 1000,
            queue_depth: None,
            max_violations: default_max_violations(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    /// Built-in device name or path to a device TOML.
    pub device: String,
    #[serde(default)]
    pub policy: DspPolicy,
    /// Doubling steps for the default z sweep.
    #[serde(default = "default_z_steps")]
    pub z_steps: u32,
}

fn default_z_steps() -> u32 {
    4
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            device: "xc7a100t".into(),
            policy: DspPolicy::FfBp,
            z_steps: default_z_steps(),
        }
    }
}

impl Default for RunConfig {
    /// The reference experiment, with round-to-nearest-even quantization.
    fn default() -> Self {
        let fmt = FixedFormat::with_rounding(12, 3, 8, RoundingMode::NearestEven).unwrap();
        let train = TrainConfig::reference(Backend::Fixed { format: fmt });
        Self {
            out: default_out(),
            network: NetworkSpec::reference(),
            data: DataConfig::default(),
            train,
            clip: ClipStudyConfig::default(),
            trace: TraceConfig::default(),
            estimate: EstimateConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse `text`, applying `key.path=value` overrides first.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).context("parsing config")?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc).try_into().context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            None => toml::to_string(&Self::default())?,
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.network.layer_sizes.len().saturating_sub(1);
        if n == 0 {
            bail!("network.layer_sizes: need at least two layers");
        }
        if self.network.d_out.len() != n || self.network.z.len() != n {
            bail!("network.d_out and network.z need one entry per junction ({n})");
        }
        if self.train.rolling_window == 0 {
            bail!("train.rolling_window must be positive");
        }
        Ok(())
    }

    /// One seed for weights, interleavers and the clip study.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.init_seed = seed;
        self.train.interleaver_seed = seed;
        self.clip.init_seed = seed;
        self.clip.interleaver_seed = seed;
    }

    /// Format used by commands that need one even for a float run.
    pub fn format(&self) -> FixedFormat {
        match self.train.backend {
            Backend::Fixed { format } => format,
            Backend::Float => FixedFormat::with_rounding(12, 3, 8, RoundingMode::NearestEven).unwrap(),
        }
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, else as a string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("--set {spec:?}: expected key=value");
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("--set {spec:?}: empty key segment");
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().unwrap();
    let mut table = doc;
    for (depth, p) in parents.iter().enumerate() {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("--set {spec:?}: {} is not a table", path[..=depth].join(".")),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::from_toml_str(&text, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        let sets = [
            "train.epochs=2".to_string(),
            "data.dir=/tmp/x".into(),
            "train.backend.format.bits=[10,2,7]".into(),
            "train.update_semantics=\"pipelined-stale\"".into(),
        ];
        let cfg = RunConfig::from_toml_str(&text, &sets).unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.data.dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.format().total_bits(), 10);
        assert!(RunConfig::from_toml_str(&text, &["train.epochs".into()]).is_err());
        assert!(RunConfig::from_toml_str(&text, &["train.epochs.x=1".into()]).is_err());
    }

    #[test]
    fn field_names_in_errors() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        let err = RunConfig::from_toml_str(&text, &["train.epochs=\"many\"".into()]).unwrap_err();
        assert!(format!("{err:#}").contains("epochs"), "{err:#}");
        let err = RunConfig::from_toml_str(&text, &["bogus=1".into()]).unwrap_err();
        assert!(format!("{err:#}").contains("bogus"), "{err:#}");
    }
}

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tse_core::backbone::BackboneConfig;
use tse_core::conditioning::EmbedderConfig;
use tse_core::diffusion::{SamplerConfig, ScheduleConfig};
use tse_core::eval::ClassifierConfig;
use tse_core::synth::toy::ToyCorpusConfig;
use tse_core::synth::{DatasetConfig, IngestConfig};
use tse_core::trainer::{ReferenceMode, TrainConfig};

use crate::UsageError;

/// Where synth-data takes its source clips from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Generate the synthetic toy corpus instead of reading `root`.
    pub toy: bool,
    pub root: Option<String>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { toy: true, root: None }
    }
}

/// Backbone preset plus per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
    pub depth: Option<usize>,
    pub width: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub rope_base: Option<f64>,
    pub skip_connections: Option<bool>,
    /// Train in 64-bit instead of 32-bit.
    pub double_precision: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "toy".into(),
            depth: None,
            width: None,
            heads: None,
            mlp_ratio: None,
            rope_base: None,
            skip_connections: None,
            double_precision: false,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> anyhow::Result<BackboneConfig> {
        let mut c = BackboneConfig::preset(&self.preset).map_err(|e| UsageError(e.to_string()))?;
        if let Some(v) = self.depth {
            c.depth = v;
        }
        if let Some(v) = self.width {
            c.width = v;
        }
        if let Some(v) = self.heads {
            c.heads = v;
        }
        if let Some(v) = self.mlp_ratio {
            c.mlp_ratio = v;
        }
        if let Some(v) = self.rope_base {
            c.rope_base = v;
        }
        if let Some(v) = self.skip_connections {
            c.skip_connections = v;
        }
        c.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(c)
    }
}

/// Everything a command can be configured with. Every section is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub reference_mode: ReferenceMode,
    pub corpus: CorpusSection,
    pub toy: ToyCorpusConfig,
    pub ingest: IngestConfig,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub embedder: EmbedderConfig,
    pub classifier: ClassifierConfig,
    pub sampler: SamplerConfig,
}

impl PipelineConfig {
    /// File, then `key=value` overrides, then the seed flag.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> anyhow::Result<Self> {
        let mut root = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| UsageError(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for ov in overrides {
            apply_override(&mut root, ov)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| UsageError(format!("invalid configuration: {e}")))?;
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        cfg.propagate_seed();
        Ok(cfg)
    }

    /// The top-level seed drives every stochastic stage.
    fn propagate_seed(&mut self) {
        let s = self.seed;
        self.toy.seed = s;
        self.ingest.seed = s;
        self.train.seed = s;
        self.sampler.seed = s;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, ov: &str) -> anyhow::Result<()> {
    let Some((key, raw)) = ov.split_once('=') else {
        bail!(UsageError(format!("override `{ov}` is not key=value")));
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(UsageError(format!("override key `{key}` is malformed")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| UsageError(format!("override `{key}`: `{part}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

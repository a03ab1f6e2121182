use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use varifocal_core::hybridopt::{EvalSettings, PipelineConfig};
use varifocal_core::mesh::{hex_digest, AUGMENT_RADIUS};
use varifocal_core::pseudofem::CalibrationTarget;
use varifocal_core::surrogate::{SurrogateConfig, TrainConfig};
use varifocal_core::{MeshSpec, OracleParams};

/// Designs for `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    pub v_range: [f64; 2],
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 100,
            v_range: [0.3, 0.7],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub mesh: MeshSpec,
    /// mm.
    pub augment_radius: f64,
    pub oracle: OracleParams,
    pub calibration: CalibrationTarget,
    pub eval: EvalSettings,
    pub data: DataConfig,
    pub surrogate: SurrogateConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut pipeline = PipelineConfig::default();
        pipeline.hybrid.surrogate = SurrogateConfig::desk(0);
        Self {
            output_dir: PathBuf::from("runs/default"),
            mesh: MeshSpec::default(),
            augment_radius: AUGMENT_RADIUS,
            oracle: OracleParams::default(),
            calibration: CalibrationTarget::default(),
            eval: EvalSettings::default(),
            data: DataConfig::default(),
            surrogate: SurrogateConfig::desk(0),
            train: TrainConfig::default(),
            pipeline,
        }
    }
}

impl RunConfig {
    /// Reads `path` (or the defaults), applies `key.path=value` overrides and
    /// validates the result against the schema.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| anyhow::anyhow!("invalid config: {}", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.objectives.validate()?;
        self.oracle.validate()?;
        if !(self.augment_radius >= 0.0) {
            bail!("augment_radius must be >= 0");
        }
        if self.data.count == 0 {
            bail!("data.count must be >= 1");
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration without `output_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("config is a table").remove("output_dir");
        hex_digest(v.to_string().as_bytes())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn apply_override(table: &mut toml::Table, text: &str) -> Result<()> {
    let (key, raw) = text.split_once('=').with_context(|| format!("override `{text}` is not key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override `{text}` has an empty key");
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override `{text}`: `{p}` is not a table"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

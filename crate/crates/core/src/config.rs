//! Run configuration: TOML file over defaults, then dotted `key=value`
//! overrides. Unknown keys are rejected with their full path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::backbones::{FrozenEncoderConfig, TokenEncoderConfig};
use crate::data::{Layout, PreprocessConfig, ToyConfig};
use crate::error::{MmrError, Result};
use crate::exec::Execution;
use crate::heatmap::HeatmapScale;
use crate::metrics::DEFAULT_FPR_LIMIT;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root; empty means the toy corpus under the run directory.
    pub root: Option<PathBuf>,
    pub layout: Layout,
    pub preprocess: PreprocessConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            layout: Layout::Aebad,
            preprocess: PreprocessConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fpr_limit: f64,
    pub batch_size: usize,
    pub heatmap_scale: HeatmapScale,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fpr_limit: DEFAULT_FPR_LIMIT,
            batch_size: 16,
            heatmap_scale: HeatmapScale::Fixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub out_dir: PathBuf,
    pub device: String,
    /// Data-parallel helpers on the thread pool; off runs everything in order.
    pub parallel: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            out_dir: PathBuf::from("runs/default"),
            device: "cpu".into(),
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub toy: ToyConfig,
    pub encoder: TokenEncoderConfig,
    pub teacher: FrozenEncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub run: RunSection,
}

impl RunConfig {
    /// Desk-scale setup: 4-layer width-192 encoder, toy teacher, 128-pixel
    /// toy corpus, 30 epochs.
    pub fn toy() -> Self {
        RunConfig {
            data: DataConfig {
                preprocess: PreprocessConfig {
                    resize_to: 128,
                    crop_to: 128,
                    ..Default::default()
                },
                ..Default::default()
            },
            toy: ToyConfig::default(),
            encoder: TokenEncoderConfig::tiny(192, 4, 3, 16),
            teacher: FrozenEncoderConfig::toy(),
            train: TrainConfig {
                epochs: 30,
                ..Default::default()
            },
            eval: EvalConfig::default(),
            run: RunSection {
                out_dir: PathBuf::from("runs/toy"),
                ..Default::default()
            },
        }
    }

    pub fn execution(&self) -> Execution {
        if self.run.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.preprocess.validate()?;
        self.encoder.validate()?;
        self.teacher.validate()?;
        self.train.validate()?;
        if self.data.root.is_none() {
            self.toy.validate()?;
            if self.toy.image_size < self.data.preprocess.crop_to {
                return Err(MmrError::config(
                    "data.preprocess.crop_to",
                    format!("exceeds the toy image size {}", self.toy.image_size),
                ));
            }
        }
        if !(self.eval.fpr_limit > 0.0 && self.eval.fpr_limit <= 1.0) {
            return Err(MmrError::config("eval.fpr_limit", "must lie in (0, 1]"));
        }
        if self.eval.batch_size == 0 {
            return Err(MmrError::config("eval.batch_size", "must be positive"));
        }
        if self.run.device != "cpu" {
            return Err(MmrError::config(
                "run.device",
                format!("`{}` is not available in this build (only `cpu`)", self.run.device),
            ));
        }
        Ok(())
    }

    /// Resolve `base` ← file ← overrides and validate.
    pub fn resolve(base: RunConfig, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree = to_table(&base)?;
        if let Some(path) = file {
            if !path.exists() {
                return Err(MmrError::NotFound(path.to_path_buf()));
            }
            let text = std::fs::read_to_string(path).map_err(|e| MmrError::io(path, e))?;
            let parsed: Table = text
                .parse()
                .map_err(|e: toml::de::Error| MmrError::config(path.display().to_string(), e.message().to_string()))?;
            merge(&mut tree, parsed);
        }
        for (key, raw) in overrides {
            set_dotted(&mut tree, key, parse_scalar(raw))?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(Value::Table(tree)).map_err(|e| {
            let field = e.path().to_string();
            MmrError::config(field, e.into_inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| MmrError::config("<config>", e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| MmrError::io(path, e))
    }
}

fn to_table(cfg: &RunConfig) -> Result<Table> {
    match Value::try_from(cfg).map_err(|e| MmrError::config("<config>", e.to_string()))? {
        Value::Table(t) => Ok(t),
        _ => unreachable!("a struct serializes to a table"),
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Interpret an override as a TOML literal, falling back to a bare string.
fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(tree: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(MmrError::config(key, "malformed override key"));
    }
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => return Err(MmrError::config(key, format!("`{part}` is not a section"))),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Split `key=value`.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| MmrError::config(arg, "override must look like key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

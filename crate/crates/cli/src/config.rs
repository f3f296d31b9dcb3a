//! Pipeline configuration file with `--set key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use signdet::capture::CaptureConfig;
use signdet::dataset::LabelMap;
use signdet::infer::PostprocessConfig;
use signdet::net::{ModelConfig, TrainConfig};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset_root: PathBuf,
    pub records_dir: PathBuf,
    pub label_map: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub split_file: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset_root: "images".into(),
            records_dir: "records".into(),
            label_map: "label_map.pbtxt".into(),
            checkpoint_dir: "checkpoints".into(),
            split_file: "split.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratio: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { ratio: 0.8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub paths: Paths,
    pub split: SplitConfig,
    pub capture: CaptureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: PostprocessConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            version: CONFIG_VERSION,
            paths: Paths::default(),
            split: SplitConfig::default(),
            capture: CaptureConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            inference: PostprocessConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads `path` (or starts from defaults), applies the overrides in order,
    /// then resolves relative paths against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let (mut tree, base) = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::io(format!("cannot read config {}: {e}", p.display())))?;
                let tree: toml::Table = text
                    .parse()
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                (tree, p.parent().map(Path::to_path_buf))
            }
            None => (toml::Table::new(), None),
        };
        for ov in overrides {
            apply_override(&mut tree, ov)?;
        }
        let explicit_capture_root = tree
            .get("capture")
            .and_then(|c| c.get("output_root"))
            .is_some();
        let mut cfg: PipelineConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.message().to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        if let Some(base) = base.filter(|b| !b.as_os_str().is_empty()) {
            cfg.paths.resolve_against(&base);
            if cfg.capture.output_root.is_relative() {
                cfg.capture.output_root = base.join(&cfg.capture.output_root);
            }
        }
        // captures land in the dataset unless told otherwise
        if !explicit_capture_root {
            cfg.capture.output_root = cfg.paths.dataset_root.clone();
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config always serializes")
    }

    /// Checks the model sizes against a label map.
    pub fn check_labels(&self, labels: &LabelMap) -> Result<(), CliError> {
        if self.model.num_classes != labels.len() {
            return Err(CliError::config(format!(
                "model.num_classes is {} but the label map has {} labels",
                self.model.num_classes,
                labels.len()
            )));
        }
        Ok(())
    }

    pub fn validate_model(&self) -> Result<(), CliError> {
        self.model.validate()?;
        if self.inference.coder != self.train.loss.coder {
            return Err(CliError::config(
                "inference.coder must equal train.loss.coder".to_string(),
            ));
        }
        Ok(())
    }
}

impl Paths {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.dataset_root,
            &mut self.records_dir,
            &mut self.label_map,
            &mut self.checkpoint_dir,
            &mut self.split_file,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Sets a dotted key in the tree. The value is parsed as a TOML value and
/// falls back to a bare string, so `paths.dataset_root=data` works unquoted.
fn apply_override(tree: &mut toml::Table, ov: &str) -> Result<(), CliError> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {ov:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("override key {key:?} is malformed")));
    }
    let value = parse_value(raw.trim());
    let mut table = tree;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("override key {key:?}: {part} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

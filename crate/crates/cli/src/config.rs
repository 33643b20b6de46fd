//! Versioned JSON experiment configuration with environment overrides.

use std::fmt;
use std::path::Path;

use bovila_core::experiments::{GradcheckConfig, ABLATION_ROWS};
use bovila_core::model::{ArchConfig, ModelConfig};
use bovila_core::trainer::TrainConfig;
use bovila_core::world::WorldConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variables starting with this prefix override config fields.
/// The rest of the name is the field path, segments separated by `__`,
/// case-insensitive: `BOVILA_TRAIN__EPOCHS=3`. Values are parsed as JSON
/// and fall back to a plain string.
pub const ENV_PREFIX: &str = "BOVILA_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_train: 2000, n_val: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Subset of the cumulative rows to run, in order.
    #[serde(default = "all_rows")]
    pub rows: Vec<String>,
    /// Keep a checkpoint of every run.
    #[serde(default)]
    pub save_checkpoints: bool,
}

fn all_rows() -> Vec<String> {
    ABLATION_ROWS.iter().map(|s| s.to_string()).collect()
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: (0..5).collect(), rows: all_rows(), save_checkpoints: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub sigmas: Vec<f64>,
    pub rhos: Vec<f64>,
    /// Minimum Spearman correlation between level and mean `u`.
    pub spearman_min: f64,
    /// Maximum one-sided Mann-Whitney p-value.
    pub p_max: f64,
    /// Seed for corruption noise and generated questions.
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            sigmas: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            rhos: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            spearman_min: 0.9,
            p_max: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BreakdownConfig {
    /// Validation examples used for the per-epoch zero-fraction statistic.
    pub probe_examples: usize,
}

impl Default for BreakdownConfig {
    fn default() -> Self {
        Self { probe_examples: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub world: WorldConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
    #[serde(default)]
    pub breakdown: BreakdownConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            world: WorldConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            ablation: AblationConfig::default(),
            analysis: AnalysisConfig::default(),
            gradcheck: GradcheckConfig::default(),
            breakdown: BreakdownConfig::default(),
        }
    }
}

/// A configuration problem, tied to the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "config: {}", self.message)
        } else {
            write!(f, "config field `{}`: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.into(), message: message.into() }
}

impl ExperimentConfig {
    pub fn model_config(&self) -> ModelConfig {
        let vocab_size = self.world.vocabulary().map(|v| v.len()).unwrap_or(0);
        ModelConfig::new(&self.arch, vocab_size, self.world.events_per_video, self.world.feature_width)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(err(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        let core = |e: bovila_core::Error, section: &str| match e {
            bovila_core::Error::Config { field, reason } => {
                let field = if field.starts_with(section) { field } else { format!("{section}.{field}") };
                err(field, reason)
            }
            other => err(section, other.to_string()),
        };
        self.world.validate().map_err(|e| core(e, "world"))?;
        self.train.validate().map_err(|e| core(e, "train"))?;
        self.model_config().validate().map_err(|e| core(e, "arch"))?;
        if self.data.n_train == 0 {
            return Err(err("data.n_train", "must be at least 1"));
        }
        if self.data.n_val == 0 {
            return Err(err("data.n_val", "must be at least 1"));
        }
        if self.ablation.seeds.is_empty() {
            return Err(err("ablation.seeds", "need at least one seed"));
        }
        if let Some(r) = self.ablation.rows.iter().find(|r| !ABLATION_ROWS.contains(&r.as_str())) {
            return Err(err("ablation.rows", format!("unknown row `{r}`, expected one of {ABLATION_ROWS:?}")));
        }
        let levels_ok = |xs: &[f64]| xs.len() >= 2 && xs.windows(2).all(|w| w[0] < w[1]);
        if !levels_ok(&self.analysis.sigmas) || self.analysis.sigmas[0] < 0.0 {
            return Err(err("analysis.sigmas", "need at least two increasing levels >= 0"));
        }
        if !levels_ok(&self.analysis.rhos)
            || self.analysis.rhos[0] < 0.0
            || *self.analysis.rhos.last().unwrap() > 1.0
        {
            return Err(err("analysis.rhos", "need at least two increasing levels in [0, 1]"));
        }
        if self.gradcheck.points == 0 || self.gradcheck.entries_per_param == 0 {
            return Err(err("gradcheck.points", "points and entries_per_param must be at least 1"));
        }
        if !(1e-7..=1e-3).contains(&self.gradcheck.eps) {
            return Err(err("gradcheck.eps", "must lie in [1e-7, 1e-3]"));
        }
        Ok(())
    }
}

/// Apply `PREFIX`-style overrides from `(name, value)` pairs.
pub fn apply_overrides<I>(doc: &mut Value, vars: I) -> Result<(), ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (name, raw) in vars {
        let path: Vec<String> = name[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
        if path.iter().any(|s| s.is_empty()) {
            return Err(err(name, "malformed override name"));
        }
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        let mut node = &mut *doc;
        for (i, seg) in path.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| err(path[..i].join("."), format!("override {name} descends into a non-object")))?;
            if i + 1 == path.len() {
                obj.insert(seg.clone(), value.clone());
                break;
            }
            node = obj.entry(seg.clone()).or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}

/// Parse, apply overrides, deserialize with field paths, then validate.
pub fn parse_config<I>(text: &str, vars: I) -> Result<ExperimentConfig, ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut doc: Value = serde_json::from_str(text).map_err(|e| err("", format!("invalid JSON: {e}")))?;
    apply_overrides(&mut doc, vars)?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let field = e.path().to_string();
        err(if field == "." { String::new() } else { field }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config<I>(path: &Path, vars: I) -> Result<ExperimentConfig, ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let text = std::fs::read_to_string(path).map_err(|e| err("", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, vars)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_text() -> String {
        serde_json::to_string_pretty(&ExperimentConfig::default()).unwrap()
    }

    #[test]
    fn default_round_trips() {
        let cfg = parse_config(&default_text(), []).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn missing_field_is_named() {
        let mut doc: Value = serde_json::from_str(&default_text()).unwrap();
        doc["train"].as_object_mut().unwrap().remove("learning_rate");
        let e = parse_config(&doc.to_string(), []).unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        assert_eq!(e.field, "train");
    }

    #[test]
    fn wrong_type_reports_path() {
        let mut doc: Value = serde_json::from_str(&default_text()).unwrap();
        doc["train"]["epochs"] = Value::String("ten".into());
        let e = parse_config(&doc.to_string(), []).unwrap_err();
        assert_eq!(e.field, "train.epochs");
    }

    #[test]
    fn unknown_field_rejected() {
        let mut doc: Value = serde_json::from_str(&default_text()).unwrap();
        doc["train"]["epoch"] = Value::from(3);
        assert!(parse_config(&doc.to_string(), []).is_err());
    }

    #[test]
    fn invalid_value_names_field() {
        let mut doc: Value = serde_json::from_str(&default_text()).unwrap();
        doc["train"]["epochs"] = Value::from(0);
        let e = parse_config(&doc.to_string(), []).unwrap_err();
        assert_eq!(e.field, "train.epochs");
        doc["train"]["epochs"] = Value::from(1);
        doc["schema_version"] = Value::from(7);
        assert_eq!(parse_config(&doc.to_string(), []).unwrap_err().field, "schema_version");
    }

    #[test]
    fn env_overrides_apply() {
        let vars = vec![
            ("BOVILA_TRAIN__EPOCHS".to_string(), "3".to_string()),
            ("BOVILA_WORLD__SHAPES".to_string(), r#"["a","b","c","d","e"]"#.to_string()),
            ("OTHER".to_string(), "1".to_string()),
        ];
        let cfg = parse_config(&default_text(), vars).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.world.shapes.len(), 5);
        let bad = vec![("BOVILA_TRAIN__NOPE".to_string(), "1".to_string())];
        assert!(parse_config(&default_text(), bad).is_err());
    }
}

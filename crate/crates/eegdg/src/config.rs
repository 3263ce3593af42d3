//! Flat dotted-key JSON configuration shared by every CLI command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{ExtractorConfig, ModelConfig};
use crate::synth::SimConfig;
use crate::trainer::TrainConfig;

/// Settings for turning one raw recording into source domains.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
    pub filter_order: usize,
    /// Window start relative to each marker onset, in seconds.
    pub window_start_s: f64,
    pub window_length_s: f64,
    /// Number of source domains the trials are split into.
    pub n_domains: usize,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            band_lo_hz: 8.0,
            band_hi_hz: 35.0,
            filter_order: 4,
            window_start_s: 0.0,
            window_length_s: 4.0,
            n_domains: 2,
            seed: 0,
        }
    }
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
}

fn field_names<T: Serialize>(value: &T) -> Vec<String> {
    match serde_json::to_value(value).expect("config structs serialize") {
        Value::Object(map) => map.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn merge_section<T: Serialize + for<'de> Deserialize<'de>>(
    section: &str,
    base: &T,
    overrides: Map<String, Value>,
) -> Result<T> {
    let mut value = serde_json::to_value(base).expect("config structs serialize");
    let obj = value.as_object_mut().expect("config structs are objects");
    for (k, v) in overrides {
        obj.insert(k, v);
    }
    serde_json::from_value(value)
        .map_err(|e| Error::config(format!("section \"{section}\": {e}")))
}

/// Applies flat `section.field` overrides on top of defaults. Unknown keys,
/// nested objects at the top level, and type mismatches are config errors
/// naming the offender.
pub fn apply_overrides(mut config: RunConfig, raw: &Value) -> Result<RunConfig> {
    let top = raw
        .as_object()
        .ok_or_else(|| Error::config("config file must hold a JSON object"))?;

    let sim_fields = field_names(&config.sim);
    let train_fields = field_names(&config.train);
    let pre_fields = field_names(&config.preprocess);
    let model_fields = field_names(&ModelConfig::default());
    let extractor_fields = field_names(&ExtractorConfig::default());

    let mut sim_over = Map::new();
    let mut train_over = Map::new();
    let mut pre_over = Map::new();
    let mut model_over = Map::new();
    let mut extractor_over = Map::new();

    for (key, value) in top {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::config(format!("unknown config key \"{key}\"")))?;
        let known = |names: &[String]| names.iter().any(|n| n == field);
        match section {
            "sim" if known(&sim_fields) => {
                sim_over.insert(field.to_string(), value.clone());
            }
            "train" if known(&train_fields) => {
                train_over.insert(field.to_string(), value.clone());
            }
            "preprocess" if known(&pre_fields) => {
                pre_over.insert(field.to_string(), value.clone());
            }
            // model.* keys cover both the wrapper and the extractor inside it.
            "model" if known(&model_fields) && field != "extractor" => {
                model_over.insert(field.to_string(), value.clone());
            }
            "model" if known(&extractor_fields) => {
                extractor_over.insert(field.to_string(), value.clone());
            }
            _ => return Err(Error::config(format!("unknown config key \"{key}\""))),
        }
    }

    config.sim = merge_section("sim", &config.sim, sim_over)?;
    config.train = merge_section("train", &config.train, train_over)?;
    config.preprocess = merge_section("preprocess", &config.preprocess, pre_over)?;

    if !model_over.is_empty() || !extractor_over.is_empty() {
        let base = config.train.architecture.clone().unwrap_or_default();
        let extractor = merge_section("model", &base.extractor, extractor_over)?;
        let mut model = merge_section("model", &base, model_over)?;
        model.extractor = extractor;
        config.train.architecture = Some(model);
    }
    Ok(config)
}

/// Loads the config file (missing path = all defaults) and applies it.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let config = RunConfig::default();
    let Some(path) = path else {
        return Ok(config);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ingestion(format!("reading {}: {e}", path.display())))?;
    let raw: Value = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    apply_overrides(config, &raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_load_without_a_file() {
        let cfg = load_config(None).unwrap();
        assert_eq!(cfg.train.epochs, 500);
        assert_eq!(cfg.sim.n_source_domains, 3);
        assert_eq!(cfg.preprocess.band_lo_hz, 8.0);
    }

    #[test]
    fn dotted_keys_override_each_section() {
        let raw = json!({
            "train.lr": 0.01,
            "train.epochs": 7,
            "sim.n_classes": 5,
            "preprocess.band_hi_hz": 30.0,
        });
        let cfg = apply_overrides(RunConfig::default(), &raw).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.sim.n_classes, 5);
        assert_eq!(cfg.preprocess.band_hi_hz, 30.0);
        assert_eq!(cfg.train.batch_per_domain, 8, "untouched fields keep defaults");
    }

    #[test]
    fn model_keys_build_an_architecture_override() {
        let raw = json!({
            "model.embedding_dim": 16,
            "model.branch_dim": 8,
            "model.pool1": 2,
        });
        let cfg = apply_overrides(RunConfig::default(), &raw).unwrap();
        let arch = cfg.train.architecture.expect("architecture set");
        assert_eq!(arch.extractor.embedding_dim, 16);
        assert_eq!(arch.branch_dim, 8);
        assert_eq!(arch.extractor.pool1, 2);
        assert_eq!(arch.branch_depth, 2, "wrapper defaults intact");
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        for bad in ["train.learning_rate", "optimizer.lr", "lr"] {
            let raw = json!({ bad: 1.0 });
            let err = apply_overrides(RunConfig::default(), &raw).unwrap_err();
            let msg = err.to_string();
            assert!(matches!(err, Error::Config(_)));
            assert!(msg.contains(bad), "{msg} should name {bad}");
        }
    }

    #[test]
    fn type_mismatches_are_config_errors_naming_the_section() {
        let raw = json!({ "train.epochs": "many" });
        let err = apply_overrides(RunConfig::default(), &raw).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("train"));
    }

    #[test]
    fn kernel_override_round_trips_through_json() {
        let raw = json!({ "train.kernel": { "rbf": { "fixed": 2.5 } } });
        let cfg = apply_overrides(RunConfig::default(), &raw).unwrap();
        let echo = serde_json::to_value(&cfg.train.kernel).unwrap();
        assert_eq!(echo, json!({ "rbf": { "fixed": 2.5 } }));
    }

    #[test]
    fn config_file_loading_reports_bad_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, "{ not json").unwrap();
        assert!(matches!(
            load_config(Some(&path)),
            Err(Error::Config(_))
        ));
        std::fs::write(&path, "{\"train.lr\": 0.002}").unwrap();
        let cfg = load_config(Some(&path)).unwrap();
        assert_eq!(cfg.train.lr, 0.002);
    }
}

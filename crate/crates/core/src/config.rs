//! Experiment configuration: a TOML document merged with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::cl::{AdapterKind, AdapterMode, FirstTaskOptimizer, HeadOptimizer, LossConfig, TrainSettings};
use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::es::EsConfig;
use crate::nn::{Activation, LayerSpec};
use crate::sgd::SgdConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Evocl,
    Finetune,
    Joint,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Evocl => "evocl",
            Method::Finetune => "finetune",
            Method::Joint => "joint",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    /// Latent width `S`.
    pub latent: usize,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { hidden: vec![100, 100], latent: 64, activation: Activation::Relu }
    }
}

impl NetConfig {
    pub fn extractor_spec(&self, input_dim: usize) -> Result<LayerSpec> {
        let mut widths = vec![input_dim];
        widths.extend(&self.hidden);
        widths.push(self.latent);
        LayerSpec::new(widths, self.activation)
    }
}

/// ES settings; the seed comes from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsParams {
    pub population: usize,
    pub sigma: f64,
    pub lr: f64,
    pub generations: u64,
}

impl Default for EsParams {
    fn default() -> Self {
        let d = EsConfig::default();
        EsParams { population: d.population, sigma: d.sigma, lr: d.lr, generations: d.generations }
    }
}

impl EsParams {
    pub fn with_seed(&self, seed: u64) -> EsConfig {
        EsConfig { population: self.population, sigma: self.sigma, lr: self.lr, generations: self.generations, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    /// Stored latents per class, `N`.
    pub per_class: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig { per_class: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub mode: AdapterMode,
    pub init_noise: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig { kind: AdapterKind::Mlp, mode: AdapterMode::Alternating, init_noise: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    pub blob_spread: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { num_classes: 4, train_per_class: 200, test_per_class: 100, input_dim: 16, blob_spread: 0.05 }
    }
}

fn default_tasks() -> usize {
    5
}

fn default_method() -> Method {
    Method::Evocl
}

fn default_log_every() -> u64 {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    /// Shuffle the class order with this seed; identity order when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_order_seed: Option<u64>,
    /// Worker threads for candidate evaluation; 0 uses every core.
    #[serde(default)]
    pub threads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "default_first_task")]
    pub first_task: FirstTaskOptimizer,
    /// How the head is trained on tasks learned by the evolution strategy.
    #[serde(default = "default_head_optimizer")]
    pub head_optimizer: HeadOptimizer,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub es: EsParams,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
}

fn default_first_task() -> FirstTaskOptimizer {
    FirstTaskOptimizer::Gradient
}

fn default_head_optimizer() -> HeadOptimizer {
    HeadOptimizer::Gradient
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetKind) -> Self {
        ExperimentConfig {
            dataset,
            data_dir: None,
            tasks: default_tasks(),
            method: default_method(),
            seed: 0,
            class_order_seed: None,
            threads: 0,
            output: None,
            log_every: default_log_every(),
            first_task: default_first_task(),
            head_optimizer: default_head_optimizer(),
            net: NetConfig::default(),
            es: EsParams::default(),
            loss: LossConfig::default(),
            memory: MemoryConfig::default(),
            adapter: AdapterConfig::default(),
            sgd: SgdConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 {
            return Err(Error::Config("tasks must be at least 1".into()));
        }
        if self.dataset != DatasetKind::Synthetic && self.data_dir.is_none() {
            return Err(Error::Config(format!(
                "dataset {} needs a data directory (--data-dir, data_dir in the config, or EVOCL_DATA_DIR)",
                self.dataset.dir_name()
            )));
        }
        if self.net.latent == 0 || self.net.hidden.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if self.memory.per_class == 0 {
            return Err(Error::Config("memory.per_class must be at least 1".into()));
        }
        if !(self.adapter.init_noise >= 0.0 && self.adapter.init_noise.is_finite()) {
            return Err(Error::Config("adapter.init_noise must be nonnegative".into()));
        }
        if self.dataset == DatasetKind::Synthetic {
            let s = &self.synthetic;
            if s.num_classes == 0 || s.train_per_class == 0 || s.test_per_class == 0 || s.input_dim < s.num_classes {
                return Err(Error::Config("synthetic settings need classes, examples and input_dim >= num_classes".into()));
            }
        }
        self.es.with_seed(self.seed).validate()?;
        self.loss.validate()?;
        self.sgd.validate()
    }

    /// Per-task training settings for the given run seed.
    pub fn train_settings(&self, seed: u64) -> TrainSettings {
        TrainSettings {
            es: self.es.with_seed(seed),
            loss: self.loss.clone(),
            adapter: self.adapter.kind,
            adapter_mode: self.adapter.mode,
            adapter_init_noise: self.adapter.init_noise,
            first_task: self.first_task,
            head: self.head_optimizer,
            sgd: self.sgd.clone(),
            log_every: self.log_every,
        }
    }

    /// A fully populated instance whose serialized form names every accepted key.
    fn key_template() -> Value {
        let mut cfg = ExperimentConfig::new(DatasetKind::Synthetic);
        cfg.data_dir = Some(PathBuf::new());
        cfg.class_order_seed = Some(0);
        cfg.output = Some(PathBuf::new());
        Value::try_from(cfg).expect("config serializes to TOML")
    }
}

/// Values given on the command line; each one replaces the config file's value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub dataset: Option<DatasetKind>,
    pub data_dir: Option<PathBuf>,
    pub method: Option<Method>,
    pub tasks: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub output: Option<PathBuf>,
    /// `dotted.key=value` assignments.
    pub set: Vec<String>,
    /// Used only when neither the file nor the flags name a data directory.
    pub fallback_data_dir: Option<PathBuf>,
}

fn insert_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_assignment(assignment: &str) -> Result<(String, Value)> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key.to_string(), value))
}

fn closest<'a>(word: &str, candidates: impl Iterator<Item = &'a String>) -> Option<&'a String> {
    candidates
        .map(|c| (strsim::normalized_levenshtein(word, c), c))
        .filter(|(score, _)| *score >= 0.5)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
}

fn unknown_keys(given: &Table, template: &Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in given {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match template.get(key) {
            Some(Value::Table(sub)) => {
                if let Value::Table(given_sub) = value {
                    unknown_keys(given_sub, sub, &path, out);
                }
            }
            Some(_) => {}
            None => {
                let hint = closest(key, template.keys()).map_or(String::new(), |c| format!(" (did you mean `{c}`?)"));
                out.push(format!("`{path}`{hint}"));
            }
        }
    }
}

/// Merge `text` with `overrides`, check every key and resolve defaults.
pub fn parse_config(text: &str, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut table: Table = text.parse().map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    for assignment in &overrides.set {
        let (key, value) = parse_assignment(assignment)?;
        insert_path(&mut table, &key, value)?;
    }
    let mut put = |key: &str, value: Option<Value>| match value {
        Some(v) => insert_path(&mut table, key, v),
        None => Ok(()),
    };
    let path_value = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::String(p.display().to_string()));
    put("dataset", overrides.dataset.map(|d| Value::String(d.dir_name().into())))?;
    put("data_dir", path_value(&overrides.data_dir))?;
    put("method", overrides.method.map(|m| Value::String(m.name().into())))?;
    put("tasks", overrides.tasks.map(|t| Value::Integer(t as i64)))?;
    put("seed", overrides.seed.map(|s| Value::Integer(s as i64)))?;
    put("threads", overrides.threads.map(|t| Value::Integer(t as i64)))?;
    put("output", path_value(&overrides.output))?;

    let template = ExperimentConfig::key_template();
    let mut unknown = Vec::new();
    unknown_keys(&table, template.as_table().expect("template is a table"), "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
    }
    if !table.contains_key("dataset") {
        return Err(Error::Config("no dataset given (mnist, fashion_mnist or synthetic)".into()));
    }
    let mut cfg: ExperimentConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    if cfg.data_dir.is_none() && cfg.dataset != DatasetKind::Synthetic {
        cfg.data_dir = overrides.fallback_data_dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Read a config file (or start from nothing) and apply `overrides`.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

//! Run configuration: one flat key-value file feeding every stage.
//!
//! The resolved configuration is echoed into each run's output directory
//! so a run is reproducible from its artifacts alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticConfig;
use crate::error::{Error, Result};
use crate::inference::{InferenceMode, SelectorTrainConfig};
use crate::interpreter::{InterpreterConfig, Strategy};
use crate::model::EncoderConfig;
use crate::trainer::{Regularizer, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed, propagated to every stochastic component.
    pub seed: u64,

    // Synthetic corpus.
    pub n_examples: usize,
    pub n_dev_examples: usize,
    pub chain_length: usize,
    pub n_distractors: usize,
    pub sentences_per_paragraph: usize,

    // Set construction.
    pub k_neg: usize,

    // Encoding.
    pub token_budget: usize,
    pub max_span_len: usize,

    // Encoder dimensions.
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,

    // Training.
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_total: usize,
    pub k_epochs: usize,
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub bias_backprop_encoder: bool,

    // Evidence extraction.
    pub strategy: Strategy,
    pub t_max: usize,

    // Inference.
    pub mode: InferenceMode,
    pub select_k: usize,

    // Selector training.
    pub selector_lr: f64,
    pub selector_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            n_examples: 100,
            n_dev_examples: 50,
            chain_length: 2,
            n_distractors: 8,
            sentences_per_paragraph: 3,
            k_neg: 2,
            token_budget: 128,
            max_span_len: 30,
            hidden_dim: 64,
            n_layers: 3,
            n_heads: 8,
            ffn_hidden: 128,
            lr: 1e-3,
            batch_size: 8,
            epochs_total: 6,
            k_epochs: 3,
            lambda: 0.01,
            regularizer: Regularizer::BiasDecorrelate,
            bias_backprop_encoder: false,
            strategy: Strategy::Combined,
            t_max: 5,
            mode: InferenceMode::PairedParagraph,
            select_k: 5,
            selector_lr: 1e-3,
            selector_epochs: 5,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synthetic().validate()?;
        self.train().validate()?;
        if self.n_dev_examples == 0 {
            return Err(Error::Config("n_dev_examples must be positive".into()));
        }
        if self.select_k == 0 {
            return Err(Error::Config("select_k must be positive".into()));
        }
        if self.max_span_len == 0 {
            return Err(Error::Config("max_span_len must be positive".into()));
        }
        self.selector_train().validate()?;
        // Dimension checks need a vocabulary size; any nonzero stands in.
        self.encoder(1).validate()
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_examples: self.n_examples,
            chain_length: self.chain_length,
            n_distractors: self.n_distractors,
            sentences_per_paragraph: self.sentences_per_paragraph,
            seed: self.seed,
        }
    }

    /// Dev split generator: same shape, disjoint seeded stream.
    pub fn synthetic_dev(&self) -> SyntheticConfig {
        SyntheticConfig { n_examples: self.n_dev_examples, seed: self.seed.wrapping_add(1), ..self.synthetic() }
    }

    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            max_len: self.token_budget,
            hidden_dim: self.hidden_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_hidden: self.ffn_hidden,
        }
    }

    pub fn interpreter(&self) -> InterpreterConfig {
        InterpreterConfig { strategy: self.strategy, t_max: self.t_max }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs_total: self.epochs_total,
            k_epochs: self.k_epochs,
            lambda: self.lambda,
            regularizer: self.regularizer,
            seed: self.seed,
            token_budget: self.token_budget,
            bias_backprop_encoder: self.bias_backprop_encoder,
            interpreter: self.interpreter(),
        }
    }

    pub fn selector_train(&self) -> SelectorTrainConfig {
        SelectorTrainConfig {
            lr: self.selector_lr,
            epochs: self.selector_epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            token_budget: self.token_budget,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn valid_keys() -> Vec<String> {
    match toml::Value::try_from(RunConfig::default()).expect("config serializes") {
        toml::Value::Table(t) => t.keys().cloned().collect(),
        _ => unreachable!("config serializes to a table"),
    }
}

/// Loads the configuration file (defaults when absent) and applies
/// `key=value` overrides on top. Unknown keys name the valid ones.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse().map_err(|e: toml::de::Error| {
                Error::Config(format!("{}: {e}", p.display()))
            })?
        }
        None => toml::Table::new(),
    };

    let known = valid_keys();
    for raw in overrides {
        let (key, value) = raw.split_once('=').ok_or_else(|| {
            Error::Usage(format!("override '{raw}' is not of the form key=value"))
        })?;
        let key = key.trim();
        if !known.iter().any(|k| k == key) {
            return Err(Error::Usage(format!(
                "unknown config key '{key}'; valid keys: {}",
                known.join(", ")
            )));
        }
        // Bare words (enum values) are not valid TOML scalars; fall back
        // to treating the right-hand side as a string.
        let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("key v was just parsed"),
            Err(_) => toml::Value::String(value.trim().to_string()),
        };
        table.insert(key.to_string(), parsed);
    }

    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| {
            let msg = e.to_string();
            if msg.contains("unknown field") {
                Error::Config(format!("{msg}; valid keys: {}", valid_keys().join(", ")))
            } else {
                Error::Config(msg)
            }
        })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the resolved configuration into a run directory.
pub fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))
}

//! Run configuration: a TOML document with one section per subcommand.
//! Values resolve as command-line flag, then file, then built-in default.

use std::path::Path;

use anyhow::{Context, Result};
use discorec::datamodel::Split;
use discorec::evaluate::Popularity;
use discorec::featurize::DropoutMode;
use discorec::neighbors::IndexMode;
use discorec::objective::Variant;
use discorec::synthgen::SynthConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; unset means the runtime default.
    pub threads: Option<usize>,
    pub synth: SynthConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

/// Training settings as they appear in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub variant: Variant,
    pub lambda: f64,
    pub temperature: f64,
    pub symmetric: bool,
    /// Candidate layer counts; more than one value (or more than one
    /// dropout) turns training into a grid search.
    pub layers: Vec<usize>,
    /// Output width of both towers; earlier layers double it.
    pub embedding_dim: usize,
    pub dropout: Vec<f64>,
    pub dropout_mode: DropoutMode,
    pub linear_head: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub k_negatives: usize,
    pub in_batch_negatives: bool,
    pub distinct_anchors: bool,
    pub neighbor_k: usize,
    pub neighbor_mode: IndexMode,
    pub normalize_multi_hot: bool,
    pub masking: bool,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = discorec::objective::TrainConfig::default();
        TrainSection {
            variant: Variant::MsaclKgFd,
            lambda: discorec::objective::DEFAULT_LAMBDA,
            temperature: base.objective.temperature,
            symmetric: base.objective.symmetric,
            layers: vec![base.hidden_dims.len()],
            embedding_dim: *base.hidden_dims.last().expect("default tower has layers"),
            dropout: vec![base.dropout_p],
            dropout_mode: base.dropout_mode,
            linear_head: base.linear_head,
            epochs: base.epochs,
            batch_size: base.batch_size,
            learning_rate: base.adam.learning_rate,
            k_negatives: base.k_negatives,
            in_batch_negatives: base.in_batch_negatives,
            distinct_anchors: base.distinct_anchors,
            neighbor_k: base.neighbor_k,
            neighbor_mode: base.neighbor_mode,
            normalize_multi_hot: base.schema.normalize_multi_hot,
            masking: base.masking,
            seed: base.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub baselines: Vec<Popularity>,
    pub split: Split,
    pub masking: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            baselines: Vec::new(),
            split: Split::Test,
            masking: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Hidden widths for an `layers`-deep tower ending at `output`.
pub fn layer_dims(layers: usize, output: usize) -> Vec<usize> {
    (0..layers).rev().map(|i| output << i).collect()
}

/// Overwrites `slot` when the flag was given.
pub fn overlay<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

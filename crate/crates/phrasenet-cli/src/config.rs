//! Run configuration: TOML file sections with CLI flag overrides (flags win).

use std::path::Path;

use phrasenet::error::{Error, Result};
use phrasenet::model::Variant;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub synth: SynthSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Option<String>,
    pub d_embed: Option<usize>,
    pub d_hidden: Option<usize>,
    pub n_slots: Option<usize>,
    pub source_vocab: Option<usize>,
    pub target_vocab: Option<usize>,
    pub gate_factor_on_words: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub clip_norm: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub max_len: Option<usize>,
    pub max_steps: Option<u64>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub save_every: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub vocab_size: Option<usize>,
    pub n_templates: Option<usize>,
    pub n_rules: Option<usize>,
    pub oov_fraction: Option<f64>,
    pub n_pairs: Option<usize>,
    pub dev_pairs: Option<usize>,
    pub test_pairs: Option<usize>,
    pub seed: Option<u64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: None,
            d_embed: None,
            d_hidden: None,
            n_slots: None,
            source_vocab: None,
            target_vocab: None,
            gate_factor_on_words: None,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: None,
            clip_norm: None,
            batch_size: None,
            epochs: None,
            max_len: None,
            max_steps: None,
            seed: None,
            workers: None,
            save_every: None,
        }
    }
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            vocab_size: None,
            n_templates: None,
            n_rules: None,
            oov_fraction: None,
            n_pairs: None,
            dev_pairs: None,
            test_pairs: None,
            seed: None,
        }
    }
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Dimension presets. "desk" is the default working scale; "paper-scale"
/// mirrors the published setup (620/1000 dims, 16K vocabularies) and is far
/// too large for the test suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Desk,
    PaperScale,
}

pub struct PresetDims {
    pub d_embed: usize,
    pub d_hidden: usize,
    pub n_slots: usize,
    pub vocab_cap: usize,
}

impl Preset {
    pub fn dims(self) -> PresetDims {
        match self {
            Preset::Desk => PresetDims { d_embed: 16, d_hidden: 32, n_slots: 10, vocab_cap: 120 },
            Preset::PaperScale => {
                PresetDims { d_embed: 620, d_hidden: 1000, n_slots: 10, vocab_cap: 16384 }
            }
        }
    }
}

pub fn parse_variant(s: &str) -> Result<Variant> {
    s.parse()
}

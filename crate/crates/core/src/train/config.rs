//! Run configuration, loaded from TOML.
//!
//! ```toml
//! dataset = "meld"
//! train_path = "data/train.jsonl"
//! dev_path = "data/dev.jsonl"
//! out_dir = "runs/meld"
//! seeds = [0, 1, 2, 3, 4]
//!
//! [loss]
//! alpha = 0.2
//! beta = 0.1
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use super::TrainError;
use crate::dialogue::DialogueConfig;
use crate::objectives::{LossWeights, SclVariant};
use crate::seq_model::{PositionEncoding, SeqModelConfig};
use crate::text::{LabelMap, DEFAULT_MAX_LEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dialogue_layers: usize,
    pub dialogue_heads: usize,
    pub max_len: usize,
    pub positions: PositionEncoding,
    /// Learned slot embeddings inside the dialogue transformer.
    pub window_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            dialogue_layers: 1,
            dialogue_heads: 4,
            max_len: DEFAULT_MAX_LEN,
            positions: PositionEncoding::Learned,
            window_positions: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub scl_variant: SclVariant,
    /// L2-normalize rows before the contrastive similarity.
    pub normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.1,
            tau: 0.07,
            scl_variant: SclVariant::default(),
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            warmup_ratio: 0.1,
            epochs: 30,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub use_gen: bool,
    pub use_scl: bool,
    pub use_speaker: bool,
    pub use_dialog_trans: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            use_gen: true,
            use_scl: true,
            use_speaker: true,
            use_dialog_trans: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// `meld`, `emorynlp`, `dailydialog`, `iemocap`, or `custom`.
    pub dataset: String,
    /// Label names, required for `custom`.
    pub labels: Option<Vec<String>>,
    /// Label ignored by the micro-F1 used for model selection (`custom` only).
    pub excluded_label: Option<String>,
    pub train_path: PathBuf,
    /// Falls back to the training split when absent.
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Utterances per window; one window is one optimization step.
    pub window_size: usize,
    pub shuffle: bool,
    pub min_freq: usize,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub ablation: Toggles,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: "meld".into(),
            labels: None,
            excluded_label: None,
            train_path: PathBuf::from("train.jsonl"),
            dev_path: None,
            test_path: None,
            out_dir: PathBuf::from("runs"),
            window_size: 8,
            shuffle: true,
            min_freq: 1,
            seeds: vec![0],
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            ablation: Toggles::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> TrainError {
    TrainError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(s).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train_path);
        fix(&mut self.out_dir);
        if let Some(p) = self.dev_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.test_path.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss_weights()?;
        self.label_map()?;
        if self.seeds.is_empty() {
            return Err(config_err("seeds must not be empty"));
        }
        if !(0.0..1.0).contains(&self.optim.warmup_ratio) {
            return Err(config_err(format!(
                "warmup_ratio must be in [0, 1), got {}",
                self.optim.warmup_ratio
            )));
        }
        if self.window_size < 2 {
            return Err(config_err("window_size must be at least 2"));
        }
        if self.optim.epochs == 0 {
            return Err(config_err("epochs must be at least 1"));
        }
        if !self.optim.lr.is_finite() || self.optim.lr <= 0.0 {
            return Err(config_err("lr must be positive"));
        }
        let m = &self.model;
        if m.d_model == 0 || m.heads == 0 || !m.d_model.is_multiple_of(m.heads) {
            return Err(config_err(format!(
                "heads ({}) must divide d_model ({})",
                m.heads, m.d_model
            )));
        }
        if m.dialogue_heads == 0 || !m.d_model.is_multiple_of(m.dialogue_heads) {
            return Err(config_err(format!(
                "dialogue_heads ({}) must divide d_model ({})",
                m.dialogue_heads, m.d_model
            )));
        }
        if m.max_len < 2 {
            return Err(config_err("max_len must be at least 2"));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> Result<LossWeights, TrainError> {
        LossWeights::new(self.loss.alpha, self.loss.beta, self.loss.tau)
            .map_err(|e| config_err(e.to_string()))
    }

    pub fn label_map(&self) -> Result<LabelMap, TrainError> {
        let preset = match self.dataset.to_ascii_lowercase().as_str() {
            "meld" => Some(LabelMap::meld()),
            "emorynlp" => Some(LabelMap::emorynlp()),
            "dailydialog" => Some(LabelMap::dailydialog()),
            "iemocap" => Some(LabelMap::iemocap()),
            "custom" => None,
            other => return Err(config_err(format!("unknown dataset {other:?}"))),
        };
        match (preset, &self.labels) {
            (Some(map), None) if self.excluded_label.is_none() => Ok(map),
            (Some(_), _) => Err(config_err(format!(
                "dataset {:?} has a fixed label set; use dataset = \"custom\" to supply labels",
                self.dataset
            ))),
            (None, Some(names)) => LabelMap::new(names.clone(), self.excluded_label.clone())
                .map_err(|e| config_err(e.to_string())),
            (None, None) => Err(config_err("dataset \"custom\" requires labels")),
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
            weight_decay: self.optim.weight_decay,
        }
    }

    pub fn seq_config(&self, vocab_size: usize) -> SeqModelConfig {
        let m = &self.model;
        SeqModelConfig {
            vocab_size,
            d_model: m.d_model,
            heads: m.heads,
            ffn_dim: m.ffn_dim,
            encoder_layers: m.encoder_layers,
            decoder_layers: m.decoder_layers,
            max_len: m.max_len,
            positions: m.positions,
        }
    }

    pub fn dialogue_config(&self) -> DialogueConfig {
        let m = &self.model;
        DialogueConfig {
            d_model: m.d_model,
            heads: m.dialogue_heads,
            ffn_dim: m.ffn_dim,
            layers: m.dialogue_layers,
            window_positions: m.window_positions,
            max_window: self.window_size,
        }
    }
}

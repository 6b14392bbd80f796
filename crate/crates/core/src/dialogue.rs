//! Dialogue-level transformer over the pooled utterance vectors of a window.

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::nn::MultiHeadAttention;
use crate::nn::{FeedForward, LayerNorm, INIT_STD};
use crate::tensor::{ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    /// Learned per-slot embeddings added to the window before attention.
    pub window_positions: bool,
    pub max_window: usize,
}

#[derive(Clone, Debug)]
struct DialogueLayer {
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DialogueTransformer {
    cfg: DialogueConfig,
    positions: Option<ParamId>,
    layers: Vec<DialogueLayer>,
    final_norm: LayerNorm,
}

impl DialogueTransformer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: DialogueConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let positions = cfg
            .window_positions
            .then(|| store.add_normal("dialogue.pos", &[cfg.max_window, d], INIT_STD, rng));
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("dialogue.{i}");
                DialogueLayer {
                    attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), d),
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, cfg.heads, rng),
                    ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, cfg.ffn_dim, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, "dialogue.final_norm", d);
        Self {
            cfg,
            positions,
            layers,
            final_norm,
        }
    }

    pub fn config(&self) -> &DialogueConfig {
        &self.cfg
    }

    fn input(&self, tape: &mut Tape<'_>, window: Var) -> Result<Var> {
        let w = tape.value(window);
        if w.rank() != 2 || w.cols() != self.cfg.d_model || w.rows() == 0 {
            return Err(TensorError::Dimension {
                op: "contextualize",
                msg: format!(
                    "expected [w×{}] window, got {:?}",
                    self.cfg.d_model,
                    w.shape()
                ),
            });
        }
        let rows = w.rows();
        if rows > self.cfg.max_window {
            return Err(TensorError::Contract(format!(
                "window of {rows} utterances exceeds the configured {}",
                self.cfg.max_window
            )));
        }
        match self.positions {
            Some(p) => {
                let table = tape.param(p);
                let slots = tape.slice_rows(table, 0, rows)?;
                tape.add(window, slots)
            }
            None => Ok(window),
        }
    }

    /// Context-aware utterance vectors `[w×d]`. With `enabled == false` the
    /// window is passed through untouched.
    pub fn contextualize(&self, tape: &mut Tape<'_>, window: Var, enabled: bool) -> Result<Var> {
        if !enabled {
            return Ok(window);
        }
        let mut x = self.input(tape, window)?;
        for layer in &self.layers {
            let h = layer.attn_norm.forward(tape, x)?;
            let a = layer.attn.forward(tape, h, h, None)?;
            x = tape.add(x, a)?;
            let h = layer.ffn_norm.forward(tape, x)?;
            let f = layer.ffn.forward(tape, h)?;
            x = tape.add(x, f)?;
        }
        self.final_norm.forward(tape, x)
    }

    /// Per-head attention weights of the first layer.
    pub fn attention_weights(&self, tape: &mut Tape<'_>, window: Var) -> Result<Vec<Tensor>> {
        let x = self.input(tape, window)?;
        let Some(layer) = self.layers.first() else {
            return Ok(Vec::new());
        };
        let h = layer.attn_norm.forward(tape, x)?;
        layer.attn.attention_weights(tape, h, h, None)
    }
}

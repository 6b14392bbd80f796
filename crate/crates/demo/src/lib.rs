//! Browser bindings. Every export returns JSON text so the page needs no
//! generated TypeScript glue beyond `wasm-bindgen`'s own.
//!
//! The plain functions below the bindings are what the native tests call.

use erc_core::objectives::{build_multiview, classify, scl_loss, SclVariant};
use erc_core::synthetic;
use erc_core::tensor::{Tape, Tensor};
use erc_core::text::{build_vocab, Dialogue, Utterance};
use erc_core::train::optim::{clip_global_norm, AdamW};
use erc_core::train::runner::evaluate_model;
use erc_core::train::{lr_at, ErcModel, RunConfig};
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn to_js(r: Result<serde_json::Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

/// Contrastive loss and its gradient for labelled points.
///
/// `points` is a JSON array of `[x, y, label]`.
#[wasm_bindgen(js_name = sclExplore)]
pub fn scl_explore_js(points: &str, tau: f64, variant: &str) -> Result<String, JsError> {
    to_js(scl_explore(points, tau, variant))
}

/// `total` learning rates of the warmup-then-linear-decay schedule.
#[wasm_bindgen(js_name = lrCurve)]
pub fn lr_curve_js(total: usize, warmup_ratio: f64, peak: f64) -> Vec<f64> {
    lr_curve(total, warmup_ratio, peak)
}

pub fn scl_explore(points: &str, tau: f64, variant: &str) -> Result<serde_json::Value, String> {
    let pts: Vec<(f64, f64, usize)> = serde_json::from_str(points).map_err(|e| e.to_string())?;
    let variant = match variant {
        "exclude-partner" => SclVariant::ExcludePartner,
        "supcon" => SclVariant::Supcon,
        other => return Err(format!("unknown variant {other:?}")),
    };
    if !tau.is_finite() || tau <= 0.0 {
        return Err("temperature must be positive".into());
    }
    let rows: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.0, p.1]).collect();
    let labels: Vec<usize> = pts.iter().map(|p| p.2).collect();
    let h = Tensor::from_rows(&rows).map_err(|e| e.to_string())?;
    let mut tape = Tape::without_params();
    let live = tape.leaf(h);
    let batch = build_multiview(&mut tape, live, &labels).map_err(|e| e.to_string())?;
    let loss = scl_loss(&mut tape, &batch, tau, variant, true).map_err(|e| e.to_string())?;
    let value = tape.value(loss).item().map_err(|e| e.to_string())?;
    let grad = tape
        .backward(loss)
        .map_err(|e| e.to_string())?
        .wrt_or_zeros(&tape, live);
    let grads: Vec<[f64; 2]> = (0..grad.rows())
        .map(|i| [grad.at(i, 0), grad.at(i, 1)])
        .collect();
    Ok(json!({ "loss": value, "grads": grads }))
}

pub fn lr_curve(total: usize, warmup_ratio: f64, peak: f64) -> Vec<f64> {
    (0..=total)
        .map(|s| lr_at(s, total, warmup_ratio, peak))
        .collect()
}

#[derive(Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub dev_f1: f64,
}

/// A small model trained one epoch per call on a synthetic corpus.
#[wasm_bindgen]
pub struct DemoTrainer {
    model: ErcModel,
    opt: AdamW,
    train: Vec<Dialogue>,
    dev: Vec<Dialogue>,
    epoch: usize,
    step: usize,
    total_steps: usize,
}

const DEMO_EPOCHS: usize = 30;

const DEMO_CONFIG: &str = r#"
dataset = "custom"
labels = ["joy", "anger", "sadness", "fear"]
window_size = 6
[model]
d_model = 16
heads = 2
dialogue_heads = 2
ffn_dim = 32
encoder_layers = 1
decoder_layers = 1
max_len = 16
[optim]
lr = 3e-3
"#;

#[wasm_bindgen]
impl DemoTrainer {
    /// `kind` is `"cue"` (the label is in the words) or `"context"` (every
    /// other turn needs the dialogue to be labelled).
    #[wasm_bindgen(constructor)]
    pub fn new(kind: &str, seed: u64, use_dialog_trans: bool) -> Result<DemoTrainer, JsError> {
        Self::build(kind, seed, use_dialog_trans).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = trainEpoch)]
    pub fn train_epoch_js(&mut self) -> Result<String, JsError> {
        to_js(self.train_epoch().map(|s| json!(s)))
    }

    /// Labels each line of `text`, written as `speaker: words`.
    #[wasm_bindgen(js_name = classify)]
    pub fn classify_js(&self, text: &str) -> Result<String, JsError> {
        to_js(self.classify(text))
    }

    #[wasm_bindgen(getter)]
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One training dialogue, a `speaker: words` line per turn.
    #[wasm_bindgen(js_name = sampleDialogue)]
    pub fn sample_dialogue(&self, index: usize) -> String {
        let d = &self.train[index % self.train.len()];
        d.utterances
            .iter()
            .map(|u| format!("{}: {}", u.speaker, u.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl DemoTrainer {
    pub fn build(kind: &str, seed: u64, use_dialog_trans: bool) -> Result<Self, String> {
        let corpus = match kind {
            "cue" => synthetic::cue_corpus,
            "context" => synthetic::context_corpus,
            other => return Err(format!("unknown corpus kind {other:?}")),
        };
        let train = corpus(24, 6, seed);
        let dev = corpus(8, 6, seed.wrapping_add(1));
        let mut cfg = RunConfig::from_toml_str(DEMO_CONFIG).map_err(|e| e.to_string())?;
        cfg.ablation.use_dialog_trans = use_dialog_trans;
        let vocab = build_vocab(&train, 1).map_err(|e| e.to_string())?;
        let model = ErcModel::new(cfg, vocab, synthetic::labels(), seed);
        let opt = AdamW::new(&model.store, model.config.adamw());
        let windows: usize = train.iter().map(|d| model.windows(d.len()).len()).sum();
        Ok(Self {
            model,
            opt,
            train,
            dev,
            epoch: 0,
            step: 0,
            total_steps: windows * DEMO_EPOCHS,
        })
    }

    pub fn train_epoch(&mut self) -> Result<EpochSummary, String> {
        let err = |e: erc_core::train::TrainError| e.to_string();
        let optim = self.model.config.optim.clone();
        let (mut loss, mut steps, mut correct, mut seen) = (0.0, 0, 0, 0);
        for d in &self.train {
            let tokens = self.model.encode_dialogue(d);
            let gold: Vec<usize> = d.utterances.iter().map(|u| u.label).collect();
            for range in self.model.windows(tokens.len()) {
                let mut tape = Tape::new(&self.model.store);
                let obj = self
                    .model
                    .window_objective(&mut tape, &tokens, &gold, range.clone())
                    .map_err(err)?;
                let value = tape.value(obj.total).item().map_err(|e| e.to_string())?;
                if !value.is_finite() {
                    return Err(format!("loss became {value}"));
                }
                loss += value;
                correct += obj
                    .predictions
                    .iter()
                    .zip(&gold[range.clone()])
                    .filter(|(p, g)| p == g)
                    .count();
                seen += range.len();
                let mut grads = tape
                    .backward(obj.total)
                    .map_err(|e| e.to_string())?
                    .into_param_grads(self.model.store.len());
                drop(tape);
                clip_global_norm(&mut grads, optim.grad_clip);
                // past the planned schedule the rate stays at zero
                let lr = lr_at(
                    self.step.min(self.total_steps),
                    self.total_steps,
                    optim.warmup_ratio,
                    optim.lr,
                );
                self.opt
                    .step(&mut self.model.store, &grads, lr)
                    .map_err(|e| e.to_string())?;
                self.step += 1;
                steps += 1;
            }
        }
        self.epoch += 1;
        let dev = evaluate_model(&self.model, &self.dev).map_err(err)?;
        Ok(EpochSummary {
            epoch: self.epoch,
            loss: loss / steps as f64,
            train_accuracy: correct as f64 / seen as f64,
            dev_f1: dev.primary(),
        })
    }

    pub fn classify(&self, text: &str) -> Result<serde_json::Value, String> {
        let utterances: Vec<Utterance> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(index, line)| {
                let (speaker, words) = line.split_once(':').unwrap_or(("someone", line));
                Utterance {
                    speaker: speaker.trim().to_string(),
                    text: words.trim().to_string(),
                    label: 0,
                    dialogue_id: "typed".into(),
                    index,
                }
            })
            .collect();
        if utterances.is_empty() {
            return Err("type at least one line".into());
        }
        let d = Dialogue {
            dialogue_id: "typed".into(),
            utterances,
        };
        let tokens = self.model.encode_dialogue(&d);
        let names = self.model.labels.names();
        let mut out = Vec::new();
        for range in self.model.windows(tokens.len()) {
            let mut tape = Tape::new(&self.model.store);
            let (_, context) = self
                .model
                .contextualize(&mut tape, &tokens[range.clone()])
                .map_err(|e| e.to_string())?;
            let cls = classify(&mut tape, context, &self.model.head).map_err(|e| e.to_string())?;
            let probs = tape.value(cls.probs);
            for (k, t) in range.enumerate() {
                out.push(json!({
                    "utterance": d.utterances[t].text,
                    "label": names[cls.predictions[k]],
                    "probs": names.iter().zip(probs.row(k)).map(|(n, p)| (n.clone(), json!(*p))).collect::<serde_json::Map<_, _>>(),
                }));
            }
        }
        Ok(json!(out))
    }
}

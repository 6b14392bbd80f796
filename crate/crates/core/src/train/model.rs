//! The full classifier: utterance encoder-decoder, dialogue transformer and
//! classification head, plus the per-window training objective.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, RunConfig, TrainError};
use crate::dialogue::DialogueTransformer;
use crate::objectives::{
    build_multiview, ce_loss, classify, gen_loss, scl_loss, total_loss, ClassifierHead,
    ComponentWeights, GenPair, MultiviewBatch,
};
use crate::seq_model::{EncodedUtterance, SeqModel};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::text::{encode_utterance, Dialogue, LabelMap, Vocab};

#[derive(Clone, Debug)]
pub struct ErcModel {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub labels: LabelMap,
    pub store: ParamStore,
    pub seq: SeqModel,
    pub dialogue: DialogueTransformer,
    pub head: ClassifierHead,
}

/// Everything one window contributes to a training step.
#[derive(Clone, Debug)]
pub struct WindowObjective {
    pub total: Var,
    pub ce: Var,
    pub scl: Option<Var>,
    pub gen: Option<Var>,
    pub weights: ComponentWeights,
    /// `[w×d]` contextualized utterance vectors.
    pub context: Var,
    pub predictions: Vec<usize>,
    /// Contrastive loss was enabled but the window held a single utterance.
    pub scl_skipped: bool,
    /// Generation loss was enabled but no utterance in the window has a successor.
    pub gen_empty: bool,
    pub ce_clamped: usize,
}

impl ErcModel {
    /// Fresh parameters drawn from `seed`. Registration order is fixed, so
    /// equal inputs give bit-identical models.
    pub fn new(config: RunConfig, vocab: Vocab, labels: LabelMap, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let seq = SeqModel::new(&mut store, config.seq_config(vocab.len()), &mut rng);
        let dialogue = DialogueTransformer::new(&mut store, config.dialogue_config(), &mut rng);
        let head = ClassifierHead::new(&mut store, config.model.d_model, labels.len(), &mut rng);
        Self {
            config,
            vocab,
            labels,
            store,
            seq,
            dialogue,
            head,
        }
    }

    /// Token ids per utterance, with or without speaker splicing per config.
    pub fn encode_dialogue(&self, d: &Dialogue) -> Vec<Vec<usize>> {
        d.utterances
            .iter()
            .map(|u| {
                encode_utterance(
                    u,
                    &self.vocab,
                    self.config.ablation.use_speaker,
                    self.config.model.max_len,
                )
            })
            .collect()
    }

    /// Consecutive windows of `window_size` utterances as index ranges.
    pub fn windows(&self, len: usize) -> Vec<Range<usize>> {
        let w = self.config.window_size;
        (0..len).step_by(w).map(|s| s..(s + w).min(len)).collect()
    }

    /// Encodes each utterance, pools it, and runs the dialogue transformer
    /// over the window when enabled.
    pub fn contextualize(
        &self,
        tape: &mut Tape<'_>,
        tokens: &[Vec<usize>],
    ) -> Result<(Vec<EncodedUtterance>, Var)> {
        let encoded = tokens
            .iter()
            .map(|t| self.seq.encode(tape, t))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let pooled: Vec<Var> = encoded.iter().map(|e| e.pooled).collect();
        let window = tape.concat_rows(&pooled)?;
        let context =
            self.dialogue
                .contextualize(tape, window, self.config.ablation.use_dialog_trans)?;
        Ok((encoded, context))
    }

    /// Weighted loss for the utterances `range` of a dialogue. `tokens` and
    /// `labels` cover the whole dialogue so the last utterance of a window
    /// can still be paired with its successor.
    pub fn window_objective(
        &self,
        tape: &mut Tape<'_>,
        tokens: &[Vec<usize>],
        labels: &[usize],
        range: Range<usize>,
    ) -> Result<WindowObjective> {
        self.window_objective_with_copy(tape, tokens, labels, range, None)
    }

    /// As [`Self::window_objective`], but the second contrastive view is the
    /// given constant instead of a detached copy of this tape's context.
    /// With the values of an unperturbed forward pass this reproduces the
    /// training loss while making it a function of the live view only.
    pub fn window_objective_with_copy(
        &self,
        tape: &mut Tape<'_>,
        tokens: &[Vec<usize>],
        labels: &[usize],
        range: Range<usize>,
        copy: Option<&Tensor>,
    ) -> Result<WindowObjective> {
        if range.is_empty() || range.end > tokens.len() || tokens.len() != labels.len() {
            return Err(TrainError::Internal(format!(
                "bad window {range:?} over {} utterances",
                tokens.len()
            )));
        }
        let toggles = self.config.ablation;
        let loss_cfg = &self.config.loss;
        let weights = self.config.loss_weights()?;
        let (encoded, context) = self.contextualize(tape, &tokens[range.clone()])?;
        let window_labels = &labels[range.clone()];

        let cls = classify(tape, context, &self.head)?;
        let (ce, ce_diag) = ce_loss(tape, cls.probs, window_labels)?;

        let scl_skipped = toggles.use_scl && range.len() < 2;
        let scl = if toggles.use_scl && !scl_skipped {
            let batch = match copy {
                Some(c) => {
                    let c = tape.constant(c.clone());
                    MultiviewBatch::from_views(tape, context, c, window_labels)?
                }
                None => build_multiview(tape, context, window_labels)?,
            };
            Some(scl_loss(
                tape,
                &batch,
                loss_cfg.tau,
                loss_cfg.scl_variant,
                loss_cfg.normalize,
            )?)
        } else {
            None
        };

        let pairs: Vec<GenPair<'_>> = range
            .clone()
            .filter(|&t| t + 1 < tokens.len())
            .map(|t| GenPair {
                source: &encoded[t - range.start],
                target: &tokens[t + 1],
            })
            .collect();
        let gen_empty = toggles.use_gen && pairs.is_empty();
        let gen = if toggles.use_gen && !gen_empty {
            Some(gen_loss(tape, &self.seq, &pairs)?.0)
        } else {
            None
        };

        let (total, weights) = total_loss(tape, ce, scl, gen, &weights)?;
        Ok(WindowObjective {
            total,
            ce,
            scl,
            gen,
            weights,
            context,
            predictions: cls.predictions,
            scl_skipped,
            gen_empty,
            ce_clamped: ce_diag.clamped,
        })
    }

    /// Predictions and contextualized vectors for every utterance of a corpus.
    pub fn predict(&self, corpus: &[Dialogue]) -> Result<Vec<Prediction>> {
        let mut out = Vec::new();
        for d in corpus {
            let tokens = self.encode_dialogue(d);
            for range in self.windows(tokens.len()) {
                let mut tape = Tape::new(&self.store);
                let (_, context) = self.contextualize(&mut tape, &tokens[range.clone()])?;
                let cls = classify(&mut tape, context, &self.head)?;
                let ctx = tape.value(context);
                for (k, t) in range.enumerate() {
                    let u = &d.utterances[t];
                    out.push(Prediction {
                        dialogue_id: u.dialogue_id.clone(),
                        index: u.index,
                        gold: u.label,
                        predicted: cls.predictions[k],
                        embedding: ctx.row(k).to_vec(),
                    });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub dialogue_id: String,
    pub index: usize,
    pub gold: usize,
    pub predicted: usize,
    pub embedding: Vec<f64>,
}

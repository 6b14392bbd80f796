//! Toy encoder-decoder transformer producing utterance states, pooled
//! utterance vectors, and next-utterance logits.
//!
//! The token embedding table is shared by encoder input, decoder input and
//! the output projection (`logits = h · Eᵀ`). Blocks are pre-norm with a
//! final layer norm on each stack.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    causal_mask, key_padding_mask, sinusoidal_positions, FeedForward, LayerNorm,
    MultiHeadAttention, INIT_STD,
};
use crate::tensor::{ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};
use crate::text::{BOS_ID, EOS_ID, PAD_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionEncoding {
    Learned,
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_len: usize,
    pub positions: PositionEncoding,
}

impl SeqModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            max_len: crate::text::DEFAULT_MAX_LEN,
            positions: PositionEncoding::Learned,
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

/// Encoder output for one utterance.
#[derive(Clone, Debug)]
pub struct EncodedUtterance {
    /// `[s×d]` final encoder states.
    pub hidden: Var,
    /// `[d]` column-wise max over non-pad rows of `hidden`.
    pub pooled: Var,
    /// `true` for real tokens, `false` for padding.
    pub keep: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct SeqModel {
    cfg: SeqModelConfig,
    embed: ParamId,
    enc_pos: Option<ParamId>,
    dec_pos: Option<ParamId>,
    sinusoids: Option<Tensor>,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
}

impl SeqModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: SeqModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let embed = store.add_normal("seq.embed", &[cfg.vocab_size, d], INIT_STD, rng);
        let (enc_pos, dec_pos, sinusoids) = match cfg.positions {
            PositionEncoding::Learned => (
                Some(store.add_normal("seq.encoder.pos", &[cfg.max_len, d], INIT_STD, rng)),
                Some(store.add_normal("seq.decoder.pos", &[cfg.max_len, d], INIT_STD, rng)),
                None,
            ),
            PositionEncoding::Sinusoidal => {
                (None, None, Some(sinusoidal_positions(cfg.max_len, d)))
            }
        };
        let encoder = (0..cfg.encoder_layers)
            .map(|i| {
                let p = format!("seq.encoder.{i}");
                EncoderLayer {
                    attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), d),
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, cfg.heads, rng),
                    ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, cfg.ffn_dim, rng),
                }
            })
            .collect();
        let enc_norm = LayerNorm::new(store, "seq.encoder.final_norm", d);
        let decoder = (0..cfg.decoder_layers)
            .map(|i| {
                let p = format!("seq.decoder.{i}");
                DecoderLayer {
                    self_norm: LayerNorm::new(store, &format!("{p}.self_norm"), d),
                    self_attn: MultiHeadAttention::new(
                        store,
                        &format!("{p}.self_attn"),
                        d,
                        cfg.heads,
                        rng,
                    ),
                    cross_norm: LayerNorm::new(store, &format!("{p}.cross_norm"), d),
                    cross_attn: MultiHeadAttention::new(
                        store,
                        &format!("{p}.cross_attn"),
                        d,
                        cfg.heads,
                        rng,
                    ),
                    ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, cfg.ffn_dim, rng),
                }
            })
            .collect();
        let dec_norm = LayerNorm::new(store, "seq.decoder.final_norm", d);
        Self {
            cfg,
            embed,
            enc_pos,
            dec_pos,
            sinusoids,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
        }
    }

    pub fn config(&self) -> &SeqModelConfig {
        &self.cfg
    }

    pub fn embedding(&self) -> ParamId {
        self.embed
    }

    fn embed_with_positions(
        &self,
        tape: &mut Tape<'_>,
        tokens: &[usize],
        pos: Option<ParamId>,
    ) -> Result<Var> {
        let table = tape.param(self.embed);
        let x = tape.embedding(table, tokens)?;
        let p = match (pos, &self.sinusoids) {
            (Some(pos), _) => {
                let all = tape.param(pos);
                tape.slice_rows(all, 0, tokens.len())?
            }
            (None, Some(table)) => {
                let rows = table.data()[..tokens.len() * self.cfg.d_model].to_vec();
                tape.constant(Tensor::matrix(tokens.len(), self.cfg.d_model, rows)?)
            }
            (None, None) => unreachable!("one position scheme is always configured"),
        };
        tape.add(x, p)
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len == 0 || len > self.cfg.max_len {
            return Err(TensorError::Contract(format!(
                "{what} length {len} outside 1..={}",
                self.cfg.max_len
            )));
        }
        Ok(())
    }

    /// Encodes one token sequence. `PAD_ID` positions are masked out of
    /// attention and pooling.
    pub fn encode(&self, tape: &mut Tape<'_>, tokens: &[usize]) -> Result<EncodedUtterance> {
        self.check_len("utterance", tokens.len())?;
        let keep: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
        let mask = keep
            .iter()
            .any(|k| !k)
            .then(|| key_padding_mask(tokens.len(), &keep));
        let mut x = self.embed_with_positions(tape, tokens, self.enc_pos)?;
        for layer in &self.encoder {
            let h = layer.attn_norm.forward(tape, x)?;
            let a = layer.attn.forward(tape, h, h, mask.as_ref())?;
            x = tape.add(x, a)?;
            let h = layer.ffn_norm.forward(tape, x)?;
            let f = layer.ffn.forward(tape, h)?;
            x = tape.add(x, f)?;
        }
        let hidden = self.enc_norm.forward(tape, x)?;
        let pooled = tape.max_pool_rows(hidden, Some(&keep))?;
        Ok(EncodedUtterance {
            hidden,
            pooled,
            keep,
        })
    }

    /// Teacher-forced next-token logits `[t×V]`. `target` is the decoder
    /// input and must start with `<s>`; row `j` sees only `target[..=j]`.
    pub fn decode_logits(
        &self,
        tape: &mut Tape<'_>,
        enc: &EncodedUtterance,
        target: &[usize],
    ) -> Result<Var> {
        if target.is_empty() {
            return Err(TensorError::Contract("empty decoder target".into()));
        }
        if target[0] != BOS_ID {
            return Err(TensorError::Contract(
                "decoder target must start with <s>".into(),
            ));
        }
        self.check_len("decoder target", target.len())?;
        let t = target.len();
        let self_mask = causal_mask(t);
        let cross_mask = enc
            .keep
            .iter()
            .any(|k| !k)
            .then(|| key_padding_mask(t, &enc.keep));
        let mut y = self.embed_with_positions(tape, target, self.dec_pos)?;
        for layer in &self.decoder {
            let h = layer.self_norm.forward(tape, y)?;
            let a = layer.self_attn.forward(tape, h, h, Some(&self_mask))?;
            y = tape.add(y, a)?;
            let h = layer.cross_norm.forward(tape, y)?;
            let c = layer
                .cross_attn
                .forward(tape, h, enc.hidden, cross_mask.as_ref())?;
            y = tape.add(y, c)?;
            let h = layer.ffn_norm.forward(tape, y)?;
            let f = layer.ffn.forward(tape, h)?;
            y = tape.add(y, f)?;
        }
        let y = self.dec_norm.forward(tape, y)?;
        let table = tape.param(self.embed);
        let table_t = tape.transpose(table)?;
        tape.matmul(y, table_t)
    }

    /// Argmax decoding until `</s>` or `max_steps` tokens (whichever first).
    /// The leading `<s>` is not part of the output.
    pub fn greedy_generate(
        &self,
        tape: &mut Tape<'_>,
        enc: &EncodedUtterance,
        max_steps: usize,
    ) -> Result<Vec<usize>> {
        let mut prefix = vec![BOS_ID];
        let mut out = Vec::new();
        for _ in 0..max_steps {
            if prefix.len() > self.cfg.max_len {
                break;
            }
            let logits = self.decode_logits(tape, enc, &prefix)?;
            let v = tape.value(logits);
            let last = v.row(v.rows() - 1);
            let next = argmax(last);
            out.push(next);
            if next == EOS_ID {
                break;
            }
            prefix.push(next);
        }
        Ok(out)
    }
}

/// Index of the maximum; lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(vocab: usize) -> (ParamStore, SeqModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SeqModelConfig {
            vocab_size: vocab,
            d_model: 8,
            heads: 2,
            ffn_dim: 16,
            encoder_layers: 2,
            decoder_layers: 2,
            max_len: 12,
            positions: PositionEncoding::Learned,
        };
        let model = SeqModel::new(&mut store, cfg, &mut rng);
        (store, model)
    }

    #[test]
    fn encode_shape_and_pooling() {
        let (store, model) = small(10);
        let mut tape = Tape::new(&store);
        let enc = model.encode(&mut tape, &[0, 5, 6, 1]).unwrap();
        assert_eq!(tape.shape(enc.hidden), [4, 8]);
        let h = tape.value(enc.hidden).clone();
        let pooled = tape.value(enc.pooled);
        for j in 0..8 {
            let m = (0..4).map(|i| h.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(pooled.data()[j], m);
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let (store, model) = small(10);
        let mut t1 = Tape::new(&store);
        let mut t2 = Tape::new(&store);
        let a = model.encode(&mut t1, &[0, 4, 1]).unwrap();
        let b = model.encode(&mut t2, &[0, 4, 1]).unwrap();
        assert_eq!(t1.value(a.hidden), t2.value(b.hidden));
    }

    #[test]
    fn encode_rejects_bad_tokens() {
        let (store, model) = small(10);
        let mut tape = Tape::new(&store);
        assert!(matches!(
            model.encode(&mut tape, &[0, 10, 1]),
            Err(TensorError::Index { .. })
        ));
        assert!(model.encode(&mut tape, &[]).is_err());
        assert!(model.encode(&mut tape, &[0; 13]).is_err());
    }

    #[test]
    fn decode_shape_and_contract() {
        let (store, model) = small(10);
        let mut tape = Tape::new(&store);
        let enc = model.encode(&mut tape, &[0, 5, 1]).unwrap();
        let logits = model.decode_logits(&mut tape, &enc, &[0, 7, 8]).unwrap();
        assert_eq!(tape.shape(logits), [3, 10]);
        assert!(model.decode_logits(&mut tape, &enc, &[]).is_err());
        assert!(model.decode_logits(&mut tape, &enc, &[5]).is_err());
    }

    #[test]
    fn rigged_model_stops_immediately() {
        let (mut store, model) = small(10);
        // final norm emits a constant vector aligned with the </s> embedding
        store.set(model.dec_norm.gain, Tensor::zeros(&[8])).unwrap();
        store
            .set(model.dec_norm.bias, Tensor::full(&[8], 1.0))
            .unwrap();
        let mut table = store.get(model.embed).clone();
        for j in 0..8 {
            table.data_mut()[EOS_ID * 8 + j] = 1.0;
        }
        store.set(model.embed, table).unwrap();
        let mut tape = Tape::new(&store);
        let enc = model.encode(&mut tape, &[0, 5, 1]).unwrap();
        let out = model.greedy_generate(&mut tape, &enc, 5).unwrap();
        assert_eq!(out, [EOS_ID]);
    }

    #[test]
    fn generation_is_bounded_and_deterministic() {
        let (store, model) = small(10);
        let run = || {
            let mut tape = Tape::new(&store);
            let enc = model.encode(&mut tape, &[0, 5, 6, 1]).unwrap();
            model.greedy_generate(&mut tape, &enc, 4).unwrap()
        };
        let a = run();
        assert!(a.len() <= 4 && !a.is_empty());
        assert_eq!(a, run());
    }

    #[test]
    fn sinusoidal_positions_work() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = SeqModelConfig::toy(12);
        cfg.positions = PositionEncoding::Sinusoidal;
        let model = SeqModel::new(&mut store, cfg, &mut rng);
        assert!(store.id("seq.encoder.pos").is_none());
        let mut tape = Tape::new(&store);
        let enc = model.encode(&mut tape, &[0, 4, 1]).unwrap();
        assert_eq!(tape.shape(enc.hidden), [3, 64]);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}

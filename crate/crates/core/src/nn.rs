//! Layers shared by the utterance encoder-decoder and the dialogue transformer.

use rand::Rng;

use crate::tensor::{ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[in_dim, out_dim], INIT_STD, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gain), tape.param(self.bias));
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Position-wise `down(gelu(up(x)))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}

/// Multi-head scaled dot-product attention.
///
/// The query/key/value projections are `d×d` matrices whose column blocks
/// are the per-head projections (`d_k = d / heads`); heads are concatenated
/// and mixed by the `d×d` output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "heads must divide the model dim"
        );
        let mut proj = |p: &str| Linear::new(store, &format!("{name}.{p}"), dim, dim, false, rng);
        Self {
            query: proj("query"),
            key: proj("key"),
            value: proj("value"),
            output: proj("output"),
            heads,
            dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn check(
        &self,
        tape: &Tape<'_>,
        queries: Var,
        keys_values: Var,
        mask: Option<&Tensor>,
    ) -> Result<()> {
        for v in [queries, keys_values] {
            let t = tape.value(v);
            if t.rank() != 2 || t.cols() != self.dim || t.rows() == 0 {
                return Err(TensorError::Dimension {
                    op: "multi_head_attention",
                    msg: format!("expected [n×{}] input, got {:?}", self.dim, t.shape()),
                });
            }
        }
        if let Some(m) = mask {
            let want = [tape.value(queries).rows(), tape.value(keys_values).rows()];
            if m.shape() != want {
                return Err(TensorError::Shape {
                    op: "attention mask",
                    left: want.to_vec(),
                    right: m.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Per-head attention probabilities, each `[a×b]`, plus the projected
    /// value vars needed to finish the forward pass.
    fn scores(
        &self,
        tape: &mut Tape<'_>,
        queries: Var,
        keys_values: Var,
        mask: Option<&Tensor>,
    ) -> Result<(Vec<Var>, Var)> {
        self.check(tape, queries, keys_values, mask)?;
        let q = self.query.forward(tape, queries)?;
        let k = self.key.forward(tape, keys_values)?;
        let v = self.value.forward(tape, keys_values)?;
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mask = mask.map(|m| tape.constant(m.clone()));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let mut s = tape.scale(s, scale);
            if let Some(m) = mask {
                s = tape.add(s, m)?;
            }
            probs.push(tape.softmax_rows(s)?);
        }
        Ok((probs, v))
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        queries: Var,
        keys_values: Var,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let (probs, v) = self.scores(tape, queries, keys_values, mask)?;
        let dk = self.head_dim();
        let mut heads = Vec::with_capacity(self.heads);
        for (h, p) in probs.into_iter().enumerate() {
            let vh = tape.slice_cols(v, h * dk, dk)?;
            heads.push(tape.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        self.output.forward(tape, cat)
    }

    /// Attention probabilities per head, for inspection.
    pub fn attention_weights(
        &self,
        tape: &mut Tape<'_>,
        queries: Var,
        keys_values: Var,
        mask: Option<&Tensor>,
    ) -> Result<Vec<Tensor>> {
        let (probs, _) = self.scores(tape, queries, keys_values, mask)?;
        Ok(probs.into_iter().map(|p| tape.value(p).clone()).collect())
    }
}

/// Additive mask: `-inf` where key `j` is padding.
pub fn key_padding_mask(queries: usize, keep: &[bool]) -> Tensor {
    let row: Vec<f64> = keep
        .iter()
        .map(|&k| if k { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    let data = (0..queries).flat_map(|_| row.iter().copied()).collect();
    Tensor::matrix(queries, keep.len(), data).expect("mask shape")
}

/// Additive mask blocking attention to later positions.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::matrix(len, len, data).expect("mask shape")
}

/// Fixed sinusoidal position table `[len×dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, dim, data).expect("table shape")
}

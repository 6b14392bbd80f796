//! Classifier head, cross-entropy, multiview supervised contrastive loss,
//! next-utterance generation loss, and their weighted combination.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Linear;
use crate::seq_model::{argmax, EncodedUtterance, SeqModel};
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};
use crate::text::PAD_ID;

/// Floor applied to the gold-class probability before the log.
pub const CE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Which anchors compete in the contrastive denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SclVariant {
    /// Denominator over every row except the anchor and its own copy.
    /// Positives may include that copy, so the loss can go negative.
    #[default]
    ExcludePartner,
    /// Denominator over every row except the anchor; positives are a subset
    /// of the denominator.
    Supcon,
}

/// Live rows stacked on top of their gradient-free copies.
#[derive(Clone, Debug)]
pub struct MultiviewBatch {
    /// `[2N×d]`: rows `0..N` live, rows `N..2N` detached.
    pub x: Var,
    pub live: Var,
    pub copy: Var,
    /// Length `2N`, the live labels repeated.
    pub labels: Vec<usize>,
    pub n: usize,
}

impl MultiviewBatch {
    /// Builds the batch from explicit views. `copy` must not require
    /// gradients.
    pub fn from_views(tape: &mut Tape<'_>, live: Var, copy: Var, labels: &[usize]) -> Result<Self> {
        let n = tape.value(live).rows();
        if n < 2 {
            return Err(ObjectiveError::DegenerateBatch(format!(
                "need at least 2 samples, got {n}: a single anchor has an empty denominator"
            )));
        }
        if labels.len() != n || tape.shape(copy) != tape.shape(live) {
            return Err(ObjectiveError::Tensor(TensorError::Shape {
                op: "build_multiview",
                left: tape.shape(live).to_vec(),
                right: tape.shape(copy).to_vec(),
            }));
        }
        if tape.requires_grad(copy) {
            return Err(ObjectiveError::Config(
                "the copy view must be detached".into(),
            ));
        }
        let x = tape.concat_rows(&[live, copy])?;
        let labels = labels.iter().chain(labels).copied().collect();
        Ok(Self {
            x,
            live,
            copy,
            labels,
            n,
        })
    }
}

/// `X = [H; detach(H)]` with labels duplicated in order.
pub fn build_multiview(tape: &mut Tape<'_>, h: Var, labels: &[usize]) -> Result<MultiviewBatch> {
    let copy = tape.detach(h);
    MultiviewBatch::from_views(tape, h, copy, labels)
}

fn partner(i: usize, n: usize) -> usize {
    (i + n) % (2 * n)
}

/// Supervised contrastive loss summed over all `2N` anchors:
///
/// `L = Σ_i −1/|P(i)| Σ_{p∈P(i)} log( exp(x_i·x_p/τ) / Σ_{a∈A(i)} exp(x_i·x_a/τ) )`
///
/// where `P(i)` holds the other rows sharing `i`'s label. The denominator
/// is evaluated as a masked log-sum-exp.
pub fn scl_loss(
    tape: &mut Tape<'_>,
    batch: &MultiviewBatch,
    tau: f64,
    variant: SclVariant,
    normalize: bool,
) -> Result<Var> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(ObjectiveError::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let n = batch.n;
    let m = 2 * n;
    let x = if normalize {
        tape.l2_normalize_rows(batch.x)?
    } else {
        batch.x
    };
    let xt = tape.transpose(x)?;
    let sim = tape.matmul(x, xt)?;
    let sim = tape.scale(sim, 1.0 / tau);

    let mut denom_mask = vec![0.0; m * m];
    let mut pos_weight = vec![0.0; m * m];
    for i in 0..m {
        denom_mask[i * m + i] = f64::NEG_INFINITY;
        if variant == SclVariant::ExcludePartner {
            denom_mask[i * m + partner(i, n)] = f64::NEG_INFINITY;
        }
        let positives: Vec<usize> = (0..m)
            .filter(|&p| p != i && batch.labels[p] == batch.labels[i])
            .collect();
        // the copy of i is always a positive
        debug_assert!(!positives.is_empty());
        let w = -1.0 / positives.len() as f64;
        for p in positives {
            pos_weight[i * m + p] = w;
        }
    }
    let mask = tape.constant(Tensor::matrix(m, m, denom_mask)?);
    let masked = tape.add(sim, mask)?;
    let log_denom = tape.logsumexp_rows(masked)?;
    let log_prob = tape.sub_col(sim, log_denom)?;
    let weights = tape.constant(Tensor::matrix(m, m, pos_weight)?);
    let terms = tape.mul(log_prob, weights)?;
    Ok(tape.sum(terms))
}

#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub proj: Linear,
    pub num_classes: usize,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: Linear::new(store, "classifier", dim, num_classes, true, rng),
            num_classes,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Classification {
    /// `[N×C]` softmax rows.
    pub probs: Var,
    /// Per-row argmax, lowest index on ties.
    pub predictions: Vec<usize>,
}

pub fn classify(tape: &mut Tape<'_>, h: Var, head: &ClassifierHead) -> Result<Classification> {
    let logits = head.proj.forward(tape, h)?;
    let probs = tape.softmax_rows(logits)?;
    let v = tape.value(probs);
    let predictions = (0..v.rows()).map(|i| argmax(v.row(i))).collect();
    Ok(Classification { probs, predictions })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CeDiagnostics {
    /// Rows whose gold probability fell below [`CE_EPS`].
    pub clamped: usize,
}

/// Mean negative log-probability of the gold class.
pub fn ce_loss(tape: &mut Tape<'_>, probs: Var, labels: &[usize]) -> Result<(Var, CeDiagnostics)> {
    let gold = tape.pick(probs, labels)?;
    let clamped = tape
        .value(gold)
        .data()
        .iter()
        .filter(|&&p| p < CE_EPS)
        .count();
    if clamped > 0 {
        log::warn!("cross-entropy: {clamped} gold probabilities clamped to {CE_EPS:e}");
    }
    let gold = tape.clamp_min(gold, CE_EPS);
    let logs = tape.log(gold)?;
    let mean = tape.mean(logs);
    Ok((tape.scale(mean, -1.0), CeDiagnostics { clamped }))
}

/// One teacher-forced generation example: encoder output of `u_t` and the
/// framed token ids of `u_{t+1}` (`<s> … </s>`).
#[derive(Clone, Copy, Debug)]
pub struct GenPair<'e> {
    pub source: &'e EncodedUtterance,
    pub target: &'e [usize],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GenDiagnostics {
    pub pairs: usize,
    pub tokens: usize,
    /// No pairs were supplied; the loss is a constant 0.
    pub empty: bool,
}

/// Token-level negative log-likelihood summed over each target and
/// averaged over pairs. Pad positions in targets are ignored.
pub fn gen_loss(
    tape: &mut Tape<'_>,
    model: &SeqModel,
    pairs: &[GenPair<'_>],
) -> Result<(Var, GenDiagnostics)> {
    if pairs.is_empty() {
        log::debug!("generation loss: no adjacent pairs, contributing 0");
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok((
            zero,
            GenDiagnostics {
                empty: true,
                ..Default::default()
            },
        ));
    }
    let mut total: Option<Var> = None;
    let mut tokens = 0;
    for pair in pairs {
        let t = pair.target;
        if t.len() < 2 {
            return Err(ObjectiveError::Config(format!(
                "generation target needs at least 2 tokens, got {}",
                t.len()
            )));
        }
        let logits = model.decode_logits(tape, pair.source, &t[..t.len() - 1])?;
        let logp = tape.log_softmax_rows(logits)?;
        let gold = &t[1..];
        let picked = tape.pick(logp, gold)?;
        let picked = if gold.contains(&PAD_ID) {
            let keep: Vec<f64> = gold
                .iter()
                .map(|&g| f64::from(u8::from(g != PAD_ID)))
                .collect();
            let keep = tape.constant(Tensor::vector(keep));
            tape.mul(picked, keep)?
        } else {
            picked
        };
        tokens += gold.iter().filter(|&&g| g != PAD_ID).count();
        let s = tape.sum(picked);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let total = total.expect("non-empty pairs");
    let loss = tape.scale(total, -1.0 / pairs.len() as f64);
    Ok((
        loss,
        GenDiagnostics {
            pairs: pairs.len(),
            tokens,
            empty: false,
        },
    ))
}

/// Contrastive and generation weights plus the contrastive temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, tau: f64) -> Result<Self> {
        let w = Self { alpha, beta, tau };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_nan() || self.beta.is_nan() || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(ObjectiveError::Config(format!(
                "alpha and beta must be non-negative, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if self.alpha + self.beta >= 1.0 {
            return Err(ObjectiveError::Config(format!(
                "alpha + beta must stay below 1 so cross-entropy keeps a positive weight, got {}",
                self.alpha + self.beta
            )));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(ObjectiveError::Config(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Weights actually applied in one step. A component that is switched off
/// or inapplicable hands its weight to cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentWeights {
    pub ce: f64,
    pub scl: f64,
    pub gen: f64,
}

impl ComponentWeights {
    pub fn resolve(w: &LossWeights, scl_active: bool, gen_active: bool) -> Self {
        let scl = if scl_active { w.alpha } else { 0.0 };
        let gen = if gen_active { w.beta } else { 0.0 };
        Self {
            ce: 1.0 - scl - gen,
            scl,
            gen,
        }
    }

    pub fn sum(&self) -> f64 {
        self.ce + self.scl + self.gen
    }
}

/// `(1−α−β)·ce + α·scl + β·gen`. Absent components are treated as switched
/// off and their weight moves to cross-entropy.
pub fn total_loss(
    tape: &mut Tape<'_>,
    ce: Var,
    scl: Option<Var>,
    gen: Option<Var>,
    w: &LossWeights,
) -> Result<(Var, ComponentWeights)> {
    w.validate()?;
    let cw = ComponentWeights::resolve(w, scl.is_some(), gen.is_some());
    let mut total = tape.scale(ce, cw.ce);
    if let Some(s) = scl {
        let s = tape.scale(s, cw.scl);
        total = tape.add(total, s)?;
    }
    if let Some(g) = gen {
        let g = tape.scale(g, cw.gen);
        total = tape.add(total, g)?;
    }
    Ok((total, cw))
}

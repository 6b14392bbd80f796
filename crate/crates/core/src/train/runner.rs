//! `train`, `evaluate`, `ablate` and `dump-embeddings`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, AdamW};
use super::{checkpoint, lr_at, ErcModel, Result, RunConfig, Toggles, TrainError};
use crate::metrics::EvalReport;
use crate::tensor::Tape;
use crate::text::{build_vocab, load_corpus, Dialogue, LabelMap};

pub const CHECKPOINT_FILE: &str = "checkpoint.best";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";

/// Tolerance on `|Σ weights − 1|` and on the recomputed total loss.
pub const WEIGHT_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Corpora {
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Option<Vec<Dialogue>>,
}

pub fn load_corpora(cfg: &RunConfig, labels: &LabelMap) -> Result<Corpora> {
    let train = load_corpus(&cfg.train_path, labels)?;
    if train.iter().all(Dialogue::is_empty) {
        return Err(TrainError::Data(format!(
            "{} holds no utterances",
            cfg.train_path.display()
        )));
    }
    let dev = match &cfg.dev_path {
        Some(p) => load_corpus(p, labels)?,
        None => {
            log::warn!("no dev_path configured; selecting checkpoints on the training split");
            train.clone()
        }
    };
    if dev.iter().all(Dialogue::is_empty) {
        return Err(TrainError::Data("dev split holds no utterances".into()));
    }
    let test = cfg
        .test_path
        .as_ref()
        .map(|p| load_corpus(p, labels))
        .transpose()?;
    Ok(Corpora { train, dev, test })
}

/// Per-component triple used in the history log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub ce: f64,
    pub scl: f64,
    pub gen: f64,
}

/// One line of `history.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Mean weighted total per window.
    pub loss_total: f64,
    /// Mean raw component losses over the windows that computed them.
    pub loss_ce: f64,
    pub loss_scl: Option<f64>,
    pub loss_gen: Option<f64>,
    /// Mean applied weights per window.
    pub weights: Components,
    /// Sum over windows of `weight · loss` per component.
    pub contribution: Components,
    pub max_weight_sum_error: f64,
    /// Largest `|total − Σ weight · loss|` over the epoch's windows.
    pub max_total_residual: f64,
    pub scl_skipped: usize,
    pub gen_skipped: usize,
    pub ce_clamped: usize,
    pub grad_norm_mean: f64,
    pub train_accuracy: f64,
    pub dev_score: f64,
    pub best_dev_score: f64,
    pub improved: bool,
}

#[derive(Default)]
struct EpochAccum {
    steps: usize,
    lr: f64,
    total: f64,
    ce: f64,
    scl: (f64, usize),
    gen: (f64, usize),
    weights: Components,
    contribution: Components,
    max_weight_sum_error: f64,
    max_total_residual: f64,
    scl_skipped: usize,
    gen_skipped: usize,
    ce_clamped: usize,
    grad_norm: f64,
    correct: usize,
    seen: usize,
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Result of training one seed, with the model restored to its best-dev parameters.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub best_epoch: usize,
    pub best_dev_score: f64,
    pub dev: EvalReport,
    pub test: Option<EvalReport>,
    pub history: Vec<EpochRecord>,
    pub model: ErcModel,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub primary_metric: String,
    pub best_epoch: usize,
    pub best_dev_score: f64,
    pub dev: EvalReport,
    pub test: Option<EvalReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub best_epoch: usize,
    pub dev_score: f64,
    pub test_score: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub primary_metric: String,
    pub seeds: Vec<SeedScore>,
    pub mean_dev_score: f64,
    pub mean_test_score: Option<f64>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| TrainError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| TrainError::io(path, e))
}

/// Evaluates `model` on `corpus` with the metric conventions of its label map.
pub fn evaluate_model(model: &ErcModel, corpus: &[Dialogue]) -> Result<EvalReport> {
    let preds = model.predict(corpus)?;
    let gold: Vec<usize> = preds.iter().map(|p| p.gold).collect();
    let pred: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    Ok(EvalReport::compute(&gold, &pred, &model.labels)?)
}

/// Trains every configured seed. A single seed writes straight into
/// `out_dir`; several seeds each get `out_dir/seed-N`.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let labels = cfg.label_map()?;
    let corpora = load_corpora(cfg, &labels)?;
    train_on(cfg, &corpora).map(|(summary, _)| summary)
}

/// [`train`] on already-loaded corpora, also returning each seed's outcome.
pub fn train_on(cfg: &RunConfig, corpora: &Corpora) -> Result<(TrainSummary, Vec<SeedOutcome>)> {
    create_dir(&cfg.out_dir)?;
    let mut outcomes = Vec::new();
    for &seed in &cfg.seeds {
        let dir = if cfg.seeds.len() == 1 {
            cfg.out_dir.clone()
        } else {
            cfg.out_dir.join(format!("seed-{seed}"))
        };
        outcomes.push(train_seed(cfg, corpora, seed, &dir)?);
    }
    let seeds: Vec<SeedScore> = outcomes
        .iter()
        .map(|o| SeedScore {
            seed: o.seed,
            best_epoch: o.best_epoch,
            dev_score: o.best_dev_score,
            test_score: o.test.as_ref().map(EvalReport::primary),
        })
        .collect();
    let n = seeds.len() as f64;
    let test_scores: Option<Vec<f64>> = seeds.iter().map(|s| s.test_score).collect();
    let summary = TrainSummary {
        primary_metric: outcomes[0].dev.primary_name().to_string(),
        mean_dev_score: seeds.iter().map(|s| s.dev_score).sum::<f64>() / n,
        mean_test_score: test_scores.map(|t| t.iter().sum::<f64>() / n),
        seeds,
    };
    write_json(&cfg.out_dir.join(SUMMARY_FILE), &summary)?;
    Ok((summary, outcomes))
}

pub fn train_seed(
    cfg: &RunConfig,
    corpora: &Corpora,
    seed: u64,
    out_dir: &Path,
) -> Result<SeedOutcome> {
    create_dir(out_dir)?;
    let labels = cfg.label_map()?;
    let vocab = build_vocab(&corpora.train, cfg.min_freq)?;
    let mut model = ErcModel::new(cfg.clone(), vocab, labels, seed);
    let mut opt = AdamW::new(&model.store, cfg.adamw());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);

    let tokens: Vec<Vec<Vec<usize>>> = corpora
        .train
        .iter()
        .map(|d| model.encode_dialogue(d))
        .collect();
    let gold: Vec<Vec<usize>> = corpora
        .train
        .iter()
        .map(|d| d.utterances.iter().map(|u| u.label).collect())
        .collect();
    let mut windows: Vec<(usize, std::ops::Range<usize>)> = tokens
        .iter()
        .enumerate()
        .flat_map(|(i, t)| model.windows(t.len()).into_iter().map(move |r| (i, r)))
        .collect();
    let total_steps = windows.len() * cfg.optim.epochs;
    log::info!(
        "seed {seed}: {} parameters, {} windows per epoch, {total_steps} steps",
        model.store.num_scalars(),
        windows.len()
    );

    let history_path = out_dir.join(HISTORY_FILE);
    let mut history_file =
        BufWriter::new(File::create(&history_path).map_err(|e| TrainError::io(&history_path, e))?);
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let mut history = Vec::new();
    let mut best_dev_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_store = model.store.clone();
    let mut step = 0;

    for epoch in 1..=cfg.optim.epochs {
        if cfg.shuffle {
            windows.shuffle(&mut shuffle_rng);
        }
        let mut acc = EpochAccum::default();
        for (d, range) in &windows {
            let mut tape = Tape::new(&model.store);
            let obj = model.window_objective(&mut tape, &tokens[*d], &gold[*d], range.clone())?;
            let total = tape.value(obj.total).item()?;
            if !total.is_finite() {
                return Err(TrainError::Numeric(format!(
                    "non-finite loss {total} at epoch {epoch}, step {step}"
                )));
            }
            let ce = tape.value(obj.ce).item()?;
            let scl = obj.scl.map(|v| tape.value(v).item()).transpose()?;
            let gen = obj.gen.map(|v| tape.value(v).item()).transpose()?;
            let w = obj.weights;
            let recomputed = w.ce * ce + w.scl * scl.unwrap_or(0.0) + w.gen * gen.unwrap_or(0.0);
            acc.max_total_residual = acc.max_total_residual.max((total - recomputed).abs());
            acc.max_weight_sum_error = acc.max_weight_sum_error.max((w.sum() - 1.0).abs());
            acc.total += total;
            acc.ce += ce;
            acc.weights.ce += w.ce;
            acc.weights.scl += w.scl;
            acc.weights.gen += w.gen;
            acc.contribution.ce += w.ce * ce;
            if let Some(s) = scl {
                acc.scl.0 += s;
                acc.scl.1 += 1;
                acc.contribution.scl += w.scl * s;
            }
            if let Some(g) = gen {
                acc.gen.0 += g;
                acc.gen.1 += 1;
                acc.contribution.gen += w.gen * g;
            }
            acc.scl_skipped += usize::from(obj.scl_skipped);
            acc.gen_skipped += usize::from(obj.gen_empty);
            acc.ce_clamped += obj.ce_clamped;
            acc.correct += obj
                .predictions
                .iter()
                .zip(&gold[*d][range.clone()])
                .filter(|(p, g)| p == g)
                .count();
            acc.seen += range.len();

            let mut grads = tape
                .backward(obj.total)?
                .into_param_grads(model.store.len());
            drop(tape);
            acc.grad_norm += clip_global_norm(&mut grads, cfg.optim.grad_clip);
            let lr = lr_at(step, total_steps, cfg.optim.warmup_ratio, cfg.optim.lr);
            opt.step(&mut model.store, &grads, lr)
                .map_err(|e| TrainError::Numeric(format!("{e} (epoch {epoch}, step {step})")))?;
            acc.lr = lr;
            acc.steps += 1;
            step += 1;
        }

        let dev = evaluate_model(&model, &corpora.dev)?;
        let dev_score = dev.primary();
        let improved = dev_score > best_dev_score;
        if improved {
            best_dev_score = dev_score;
            best_epoch = epoch;
            best_store = model.store.clone();
            checkpoint::save(&ckpt_path, &model, seed, epoch, dev_score)?;
        }
        let n = acc.steps;
        let record = EpochRecord {
            epoch,
            steps: n,
            lr: acc.lr,
            loss_total: mean(acc.total, n),
            loss_ce: mean(acc.ce, n),
            loss_scl: (acc.scl.1 > 0).then(|| mean(acc.scl.0, acc.scl.1)),
            loss_gen: (acc.gen.1 > 0).then(|| mean(acc.gen.0, acc.gen.1)),
            weights: Components {
                ce: mean(acc.weights.ce, n),
                scl: mean(acc.weights.scl, n),
                gen: mean(acc.weights.gen, n),
            },
            contribution: acc.contribution,
            max_weight_sum_error: acc.max_weight_sum_error,
            max_total_residual: acc.max_total_residual,
            scl_skipped: acc.scl_skipped,
            gen_skipped: acc.gen_skipped,
            ce_clamped: acc.ce_clamped,
            grad_norm_mean: mean(acc.grad_norm, n),
            train_accuracy: mean(acc.correct as f64, acc.seen),
            dev_score,
            best_dev_score,
            improved,
        };
        log::info!(
            "seed {seed} epoch {epoch}: loss {:.4} train acc {:.3} dev {:.4} (best {:.4})",
            record.loss_total,
            record.train_accuracy,
            dev_score,
            best_dev_score
        );
        let line = serde_json::to_string(&record).expect("serializable");
        writeln!(history_file, "{line}").map_err(|e| TrainError::io(&history_path, e))?;
        history.push(record);
    }
    history_file
        .flush()
        .map_err(|e| TrainError::io(&history_path, e))?;

    model.store = best_store;
    let dev = evaluate_model(&model, &corpora.dev)?;
    let test = corpora
        .test
        .as_ref()
        .map(|t| evaluate_model(&model, t))
        .transpose()?;
    write_json(
        &out_dir.join(METRICS_FILE),
        &RunMetrics {
            seed,
            primary_metric: dev.primary_name().to_string(),
            best_epoch,
            best_dev_score,
            dev: dev.clone(),
            test: test.clone(),
        },
    )?;
    Ok(SeedOutcome {
        seed,
        out_dir: out_dir.to_path_buf(),
        best_epoch,
        best_dev_score,
        dev,
        test,
        history,
        model,
    })
}

fn load_compatible(ckpt: &Path, expected_labels: Option<&LabelMap>) -> Result<ErcModel> {
    let (model, _) = checkpoint::load(ckpt)?;
    if let Some(expected) = expected_labels {
        if expected != &model.labels {
            return Err(TrainError::Compatibility(format!(
                "checkpoint labels {:?} differ from the configured {:?}",
                model.labels.names(),
                expected.names()
            )));
        }
    }
    Ok(model)
}

/// Scores a corpus with a saved checkpoint.
pub fn evaluate(
    ckpt: &Path,
    split: &Path,
    expected_labels: Option<&LabelMap>,
) -> Result<EvalReport> {
    let model = load_compatible(ckpt, expected_labels)?;
    let corpus = load_corpus(split, &model.labels)?;
    evaluate_model(&model, &corpus)
}

/// Writes one tab-separated row per utterance: dialogue id, index, gold
/// label, predicted label, then the contextualized coordinates. Returns
/// the row count.
pub fn dump_embeddings(
    ckpt: &Path,
    split: &Path,
    out: &Path,
    expected_labels: Option<&LabelMap>,
) -> Result<usize> {
    let model = load_compatible(ckpt, expected_labels)?;
    let corpus = load_corpus(split, &model.labels)?;
    let preds = model.predict(&corpus)?;
    let file = File::create(out).map_err(|e| TrainError::io(out, e))?;
    let mut w = BufWriter::new(file);
    for p in &preds {
        let mut line = format!(
            "{}\t{}\t{}\t{}",
            p.dialogue_id,
            p.index,
            model.labels.name(p.gold),
            model.labels.name(p.predicted)
        );
        for x in &p.embedding {
            line.push('\t');
            line.push_str(&x.to_string());
        }
        writeln!(w, "{line}").map_err(|e| TrainError::io(out, e))?;
    }
    w.flush().map_err(|e| TrainError::io(out, e))?;
    Ok(preds.len())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub slug: String,
    pub toggles: Toggles,
}

/// The eight configurations: full model, single removals, pairwise
/// removals, and the model without the dialogue transformer.
pub fn ablation_rows() -> Vec<AblationRow> {
    let on = Toggles::default();
    let rows = [
        ("full", "full", on),
        (
            "-Gen",
            "no-gen",
            Toggles {
                use_gen: false,
                ..on
            },
        ),
        (
            "-SCL",
            "no-scl",
            Toggles {
                use_scl: false,
                ..on
            },
        ),
        (
            "-Speaker",
            "no-speaker",
            Toggles {
                use_speaker: false,
                ..on
            },
        ),
        (
            "-Gen-SCL",
            "no-gen-scl",
            Toggles {
                use_gen: false,
                use_scl: false,
                ..on
            },
        ),
        (
            "-SCL-Speaker",
            "no-scl-speaker",
            Toggles {
                use_scl: false,
                use_speaker: false,
                ..on
            },
        ),
        (
            "-Gen-Speaker",
            "no-gen-speaker",
            Toggles {
                use_gen: false,
                use_speaker: false,
                ..on
            },
        ),
        (
            "-Dialog-Trans",
            "no-dialog-trans",
            Toggles {
                use_dialog_trans: false,
                ..on
            },
        ),
    ];
    rows.into_iter()
        .map(|(name, slug, toggles)| AblationRow {
            name: name.into(),
            slug: slug.into(),
            toggles,
        })
        .collect()
}

/// Config for one ablation row: toggles applied and the weight of every
/// removed loss set to 0.
pub fn ablation_config(base: &RunConfig, row: &AblationRow) -> RunConfig {
    let mut cfg = base.clone();
    cfg.ablation = row.toggles;
    if !row.toggles.use_scl {
        cfg.loss.alpha = 0.0;
    }
    if !row.toggles.use_gen {
        cfg.loss.beta = 0.0;
    }
    cfg.out_dir = base.out_dir.join(&row.slug);
    cfg
}

/// Evidence from the history logs that removed components stayed out of the loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub max_weight_sum_error: f64,
    pub max_total_residual: f64,
    /// Largest weight logged for any removed component.
    pub max_disabled_weight: f64,
    /// Largest `|weight · loss|` logged for any removed component.
    pub max_disabled_contribution: f64,
    pub passed: bool,
}

impl ComponentCheck {
    pub fn from_history<'a>(
        toggles: Toggles,
        records: impl IntoIterator<Item = &'a EpochRecord>,
    ) -> Self {
        let mut c = ComponentCheck {
            max_weight_sum_error: 0.0,
            max_total_residual: 0.0,
            max_disabled_weight: 0.0,
            max_disabled_contribution: 0.0,
            passed: true,
        };
        let mut any = false;
        for r in records {
            any = true;
            c.max_weight_sum_error = c.max_weight_sum_error.max(r.max_weight_sum_error);
            c.max_total_residual = c.max_total_residual.max(r.max_total_residual);
            let mut disabled = Vec::new();
            if !toggles.use_scl {
                disabled.push((r.weights.scl, r.contribution.scl, r.loss_scl.is_some()));
            }
            if !toggles.use_gen {
                disabled.push((r.weights.gen, r.contribution.gen, r.loss_gen.is_some()));
            }
            for (w, contrib, computed) in disabled {
                c.max_disabled_weight = c.max_disabled_weight.max(w.abs());
                c.max_disabled_contribution = c.max_disabled_contribution.max(contrib.abs());
                c.passed &= !computed;
            }
        }
        c.passed &= any
            && c.max_weight_sum_error <= WEIGHT_TOL
            && c.max_total_residual <= WEIGHT_TOL * 1e3
            && c.max_disabled_weight == 0.0
            && c.max_disabled_contribution == 0.0;
        c
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub toggles: Toggles,
    pub alpha: f64,
    pub beta: f64,
    pub dev_scores: Vec<f64>,
    pub test_scores: Option<Vec<f64>>,
    pub mean_dev_score: f64,
    pub mean_test_score: Option<f64>,
    pub component_check: ComponentCheck,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub primary_metric: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationResult>,
}

/// Runs all eight rows over every seed and writes `ablation.json`.
pub fn ablate(base: &RunConfig) -> Result<AblationReport> {
    base.validate()?;
    let labels = base.label_map()?;
    let corpora = load_corpora(base, &labels)?;
    create_dir(&base.out_dir)?;
    let mut rows = Vec::new();
    let mut primary_metric = String::new();
    for row in ablation_rows() {
        log::info!("ablation row {}", row.name);
        let cfg = ablation_config(base, &row);
        let (summary, outcomes) = train_on(&cfg, &corpora)?;
        primary_metric = summary.primary_metric.clone();
        let check =
            ComponentCheck::from_history(row.toggles, outcomes.iter().flat_map(|o| &o.history));
        rows.push(AblationResult {
            name: row.name,
            toggles: row.toggles,
            alpha: cfg.loss.alpha,
            beta: cfg.loss.beta,
            dev_scores: summary.seeds.iter().map(|s| s.dev_score).collect(),
            test_scores: summary.seeds.iter().map(|s| s.test_score).collect(),
            mean_dev_score: summary.mean_dev_score,
            mean_test_score: summary.mean_test_score,
            component_check: check,
        });
    }
    let report = AblationReport {
        primary_metric,
        seeds: base.seeds.clone(),
        rows,
    };
    write_json(&base.out_dir.join(ABLATION_FILE), &report)?;
    Ok(report)
}

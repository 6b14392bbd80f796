//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fail.
//!
//! Arguments that do not start with `-` filter criteria by substring.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use erc_core::dialogue::{DialogueConfig, DialogueTransformer};
use erc_core::metrics::{micro_f1_excluding, weighted_f1};
use erc_core::objectives::{
    build_multiview, ce_loss, classify, gen_loss, scl_loss, ClassifierHead, GenPair,
    MultiviewBatch, ObjectiveError, SclVariant,
};
use erc_core::seq_model::{PositionEncoding, SeqModel, SeqModelConfig};
use erc_core::synthetic;
use erc_core::tensor::gradcheck::{random_tensor, CheckReport, GradCheck};
use erc_core::tensor::{ParamStore, Tape, Tensor, TensorError, Var};
use erc_core::text::{build_vocab, write_corpus, BOS_ID, EOS_ID, PAD_ID};
use erc_core::train::{ErcModel, RunConfig, TrainError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Outcome = Result<String, String>;

const GRAD_CASES: u64 = 50;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn erc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_erc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run erc")
}

fn erc_ok(args: &[&str]) -> Result<String, String> {
    let out = erc(args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "erc {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn read_json(path: &Path) -> Result<serde_json::Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------- gradients

fn probe(t: &mut Tape<'_>, x: Var, w: &Tensor) -> Result<Var, TensorError> {
    let w = t.constant(w.clone().reshape(t.shape(x))?);
    let y = t.mul(x, w)?;
    Ok(t.sum(y))
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store
            .set(id, random_tensor(&shape, -0.6, 0.6, rng))
            .unwrap();
    }
}

fn random_seq(rng: &mut ChaCha8Rng) -> (ParamStore, SeqModel) {
    let heads = [1, 2][rng.random_range(0..2)];
    let cfg = SeqModelConfig {
        vocab_size: rng.random_range(6..12),
        d_model: 4 * heads,
        heads,
        ffn_dim: rng.random_range(3..8),
        encoder_layers: rng.random_range(1..3),
        decoder_layers: rng.random_range(1..3),
        max_len: 10,
        positions: if rng.random_bool(0.5) {
            PositionEncoding::Learned
        } else {
            PositionEncoding::Sinusoidal
        },
    };
    let mut store = ParamStore::new();
    let model = SeqModel::new(&mut store, cfg, rng);
    randomize(&mut store, rng);
    (store, model)
}

fn tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize, pads: bool) -> Vec<usize> {
    let mut t: Vec<usize> = (0..len)
        .map(|_| loop {
            let x = rng.random_range(0..vocab);
            if x != PAD_ID {
                break x;
            }
        })
        .collect();
    if pads {
        t.extend(std::iter::repeat_n(PAD_ID, rng.random_range(1..3)));
    }
    t
}

fn framed(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<usize> {
    let mut t = vec![BOS_ID];
    let len = rng.random_range(1..5);
    t.extend(tokens(rng, vocab, len, false));
    t.push(EOS_ID);
    t
}

fn objective_err(e: ObjectiveError) -> TensorError {
    match e {
        ObjectiveError::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    }
}

fn random_batch(rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let n = rng.random_range(2..=8);
    let c = rng.random_range(2..=4);
    let d = rng.random_range(2..6);
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    (random_tensor(&[n, d], -1.0, 1.0, rng), labels)
}

type PathCheck = fn(&mut ChaCha8Rng, &GradCheck) -> Result<CheckReport, String>;

fn grad_ce(rng: &mut ChaCha8Rng, gc: &GradCheck) -> Result<CheckReport, String> {
    let n = rng.random_range(1..7);
    let c = rng.random_range(2..8);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let z = random_tensor(&[n, c], -3.0, 3.0, rng);
    gc.inputs(&[z], usize::MAX, rng, |t, v| {
        let p = t.softmax_rows(v[0])?;
        Ok::<_, ObjectiveError>(ce_loss(t, p, &labels)?.0)
    })
    .map_err(|e| e.to_string())
}

fn grad_scl(
    variant: SclVariant,
    rng: &mut ChaCha8Rng,
    gc: &GradCheck,
) -> Result<CheckReport, String> {
    let (h, labels) = random_batch(rng);
    let tau = rng.random_range(0.1..1.0);
    let normalize = rng.random_bool(0.7);
    let frozen = h.clone();
    gc.inputs(&[h], usize::MAX, rng, move |t, v| {
        let copy = t.constant(frozen.clone());
        let b = MultiviewBatch::from_views(t, v[0], copy, &labels)?;
        scl_loss(t, &b, tau, variant, normalize)
    })
    .map_err(|e| e.to_string())
}

fn grad_scl_partner(rng: &mut ChaCha8Rng, gc: &GradCheck) -> Result<CheckReport, String> {
    grad_scl(SclVariant::ExcludePartner, rng, gc)
}

fn grad_scl_supcon(rng: &mut ChaCha8Rng, gc: &GradCheck) -> Result<CheckReport, String> {
    grad_scl(SclVariant::Supcon, rng, gc)
}

fn grad_gen(rng: &mut ChaCha8Rng, gc: &GradCheck) -> Result<CheckReport, String> {
    let (store, model) = random_seq(rng);
    let v = model.config().vocab_size;
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..rng.random_range(1..4))
        .map(|_| {
            let len = rng.random_range(1..6);
            let pads = rng.random_bool(0.3);
            (tokens(rng, v, len, pads), framed(rng, v))
        })
        .collect();
    let ids: Vec<_> = store.ids().collect();
    gc.params(&store, &ids, 2, rng, |t| {
        let encoded = pairs
            .iter()
            .map(|(s, _)| model.encode(t, s))
            .collect::<Result<Vec<_>, _>>()?;
        let gp: Vec<GenPair<'_>> = encoded
            .iter()
            .zip(&pairs)
            .map(|(e, (_, target))| GenPair { source: e, target })
            .collect();
        gen_loss(t, &model, &gp).map(|r| r.0).map_err(objective_err)
    })
    .map_err(|e| e.to_string())
}

fn grad_encoder(rng: &mut ChaCha8Rng, gc: &GradCheck) -> Result<CheckReport, String> {
    let (store, model) = random_seq(rng);
    let d = model.config().d_model;
    let len = rng.random_range(1..7);
    let pads = rng.random_bool(0.5);
    let toks = tokens(rng, model.config().vocab_size, len, pads);
    let wh = random_tensor(&[toks.len(), d], -1.0, 1.0, rng);
    let wp = random_tensor(&[d], -1.0, 1.0, rng);
    let ids: Vec<_> = store.ids().collect();
    gc.params(&store, &ids, 2, rng, |t| {
        let e = model.encode(t, &toks)?;
        let a = probe(t, e.hidden, &wh)?;
        let b = probe(t, e.pooled, &wp)?;
        t.add(a, b)
    })
    .map_err(|e| e.to_string())
}

fn grad_decoder(rng: &mut ChaCha8Rng, gc: &GradCheck) -> Result<CheckReport, String> {
    let (store, model) = random_seq(rng);
    let v = model.config().vocab_size;
    let len = rng.random_range(1..6);
    let pads = rng.random_bool(0.5);
    let src = tokens(rng, v, len, pads);
    let mut target = framed(rng, v);
    target.pop();
    let w = random_tensor(&[target.len(), v], -1.0, 1.0, rng);
    let ids: Vec<_> = store.ids().collect();
    gc.params(&store, &ids, 2, rng, |t| {
        let e = model.encode(t, &src)?;
        let logits = model.decode_logits(t, &e, &target)?;
        probe(t, logits, &w)
    })
    .map_err(|e| e.to_string())
}

fn grad_dialogue(rng: &mut ChaCha8Rng, gc: &GradCheck) -> Result<CheckReport, String> {
    let heads = [1, 2][rng.random_range(0..2)];
    let d = 4 * heads;
    let cfg = DialogueConfig {
        d_model: d,
        heads,
        ffn_dim: rng.random_range(3..8),
        layers: rng.random_range(1..3),
        window_positions: rng.random_bool(0.5),
        max_window: 6,
    };
    let mut store = ParamStore::new();
    let dt = DialogueTransformer::new(&mut store, cfg, rng);
    randomize(&mut store, rng);
    let w = rng.random_range(1..=6);
    let x = random_tensor(&[w, d], -1.5, 1.5, rng);
    let probe_w = random_tensor(&[w, d], -1.0, 1.0, rng);
    let ids: Vec<_> = store.ids().collect();
    gc.params(&store, &ids, 3, rng, |t| {
        let input = t.constant(x.clone());
        let y = dt.contextualize(t, input, true)?;
        probe(t, y, &probe_w)
    })
    .map_err(|e| e.to_string())
}

fn grad_head(rng: &mut ChaCha8Rng, gc: &GradCheck) -> Result<CheckReport, String> {
    let d = rng.random_range(2..8);
    let c = rng.random_range(2..8);
    let n = rng.random_range(1..6);
    let mut store = ParamStore::new();
    let head = ClassifierHead::new(&mut store, d, c, rng);
    randomize(&mut store, rng);
    let h = random_tensor(&[n, d], -1.5, 1.5, rng);
    let w = random_tensor(&[n, c], -1.0, 1.0, rng);
    let ids: Vec<_> = store.ids().collect();
    gc.params(&store, &ids, usize::MAX, rng, |t| {
        let x = t.constant(h.clone());
        let cls = classify(t, x, &head).map_err(objective_err)?;
        probe(t, cls.probs, &w)
    })
    .map_err(|e| e.to_string())
}

fn grad_total(rng: &mut ChaCha8Rng, gc: &GradCheck) -> Result<CheckReport, String> {
    let mut cfg = RunConfig::from_toml_str(
        r#"
        dataset = "custom"
        labels = ["joy", "anger", "sadness", "fear"]
        window_size = 4
        [model]
        d_model = 4
        heads = 2
        dialogue_heads = 2
        ffn_dim = 4
        encoder_layers = 1
        decoder_layers = 1
        max_len = 10
        "#,
    )
    .unwrap();
    cfg.loss.scl_variant = if rng.random_bool(0.5) {
        SclVariant::ExcludePartner
    } else {
        SclVariant::Supcon
    };
    cfg.loss.tau = rng.random_range(0.1..1.0);
    cfg.model.window_positions = rng.random_bool(0.5);
    let corpus = synthetic::cue_corpus(2, 5, rng.random());
    let vocab = build_vocab(&corpus, 1).unwrap();
    let mut model = ErcModel::new(cfg, vocab, synthetic::labels(), rng.random());
    randomize(&mut model.store, rng);
    let d = &corpus[0];
    let toks = model.encode_dialogue(d);
    let gold: Vec<usize> = d.utterances.iter().map(|u| u.label).collect();
    let start = rng.random_range(0..3);
    let range = start..(start + rng.random_range(2..=3)).min(toks.len());
    let ids: Vec<_> = model.store.ids().collect();
    // the contrastive copy is a constant: pin it at the unperturbed values
    let copy = {
        let mut t = Tape::new(&model.store);
        let (_, ctx) = model
            .contextualize(&mut t, &toks[range.clone()])
            .map_err(|e| e.to_string())?;
        t.value(ctx).clone()
    };
    let total_of = |copy: Option<&Tensor>| -> Result<f64, String> {
        let mut t = Tape::new(&model.store);
        let o = model
            .window_objective_with_copy(&mut t, &toks, &gold, range.clone(), copy)
            .map_err(|e| e.to_string())?;
        Ok(t.value(o.total).item().unwrap())
    };
    ensure(
        total_of(None)? == total_of(Some(&copy))?,
        "pinned copy changes the loss",
    )?;
    gc.params(&model.store, &ids, 1, rng, |t| {
        model
            .window_objective_with_copy(t, &toks, &gold, range.clone(), Some(&copy))
            .map(|o| o.total)
    })
    .map_err(|e: TrainError| e.to_string())
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let gc = GradCheck::default();
    let paths: [(&str, PathCheck); 9] = [
        ("ce", grad_ce),
        ("scl/exclude-partner", grad_scl_partner),
        ("scl/supcon", grad_scl_supcon),
        ("gen", grad_gen),
        ("encoder", grad_encoder),
        ("decoder", grad_decoder),
        ("dialogue", grad_dialogue),
        ("classifier-head", grad_head),
        ("total", grad_total),
    ];
    let mut lines = Vec::new();
    for (name, check) in paths {
        let mut worst = CheckReport::default();
        for case in 0..GRAD_CASES {
            let mut rng = ChaCha8Rng::seed_from_u64(case * 7919 + name.len() as u64);
            let report = check(&mut rng, &gc).map_err(|e| format!("{name} case {case}: {e}"))?;
            ensure(
                report.passed(gc.rel_tol),
                format!(
                    "{name} case {case}: rel err {:e} at {}",
                    report.max_rel_err, report.worst
                ),
            )?;
            worst.merge(report);
        }
        lines.push(format!(
            "{name} {}/{:.1e}",
            worst.checked, worst.max_rel_err
        ));
    }
    let elapsed = start.elapsed();
    ensure(
        elapsed < Duration::from_secs(120),
        format!("took {elapsed:?}, limit 2 min"),
    )?;
    Ok(format!(
        "{GRAD_CASES} cases per path, coords/worst rel err: {}",
        lines.join(", ")
    ))
}

// ---------------------------------------------------------------- contrastive

fn scl_value(rows: &[Vec<f64>], labels: &[usize], tau: f64, variant: SclVariant) -> f64 {
    let mut tape = Tape::without_params();
    let h = tape.leaf(Tensor::from_rows(rows).unwrap());
    let batch = build_multiview(&mut tape, h, labels).unwrap();
    let l = scl_loss(&mut tape, &batch, tau, variant, true).unwrap();
    tape.value(l).item().unwrap()
}

/// Direct loop evaluation of the summed multiview contrastive loss.
fn scl_reference(rows: &[Vec<f64>], labels: &[usize], tau: f64, variant: SclVariant) -> f64 {
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect();
    let n = unit.len();
    let x: Vec<&Vec<f64>> = unit.iter().chain(unit.iter()).collect();
    let y: Vec<usize> = labels.iter().chain(labels.iter()).copied().collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..2 * n {
        let partner = (i + n) % (2 * n);
        let denom: f64 = (0..2 * n)
            .filter(|&a| a != i && !(variant == SclVariant::ExcludePartner && a == partner))
            .map(|a| dot(x[i], x[a]).exp())
            .sum();
        let pos: Vec<usize> = (0..2 * n).filter(|&p| p != i && y[p] == y[i]).collect();
        let s: f64 = pos.iter().map(|&p| dot(x[i], x[p]) - denom.ln()).sum();
        total += -s / pos.len() as f64;
    }
    total
}

fn scl_oracles() -> Outcome {
    let four_ln2 = 4.0 * 2f64.ln();
    let u = vec![0.6, 0.8];
    for tau in [0.07, 0.5, 1.0, 2.0] {
        let l = scl_value(
            &[u.clone(), u.clone()],
            &[0, 0],
            tau,
            SclVariant::ExcludePartner,
        );
        ensure(
            (l - four_ln2).abs() <= 1e-9,
            format!("identical rows, tau {tau}: {l}"),
        )?;
    }
    let ortho = scl_value(
        &[vec![1.0, 0.0], vec![0.0, 1.0]],
        &[0, 1],
        1.0,
        SclVariant::ExcludePartner,
    );
    ensure(
        (ortho - (four_ln2 - 4.0)).abs() <= 1e-9,
        format!("orthogonal two-class: {ortho}"),
    )?;
    // random batches against a direct loop evaluation
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (h, labels) = random_batch(&mut rng);
        let rows: Vec<Vec<f64>> = (0..h.rows()).map(|i| h.row(i).to_vec()).collect();
        let tau = rng.random_range(0.05..2.0);
        for variant in [SclVariant::ExcludePartner, SclVariant::Supcon] {
            let a = scl_value(&rows, &labels, tau, variant);
            let b = scl_reference(&rows, &labels, tau, variant);
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    ensure(
        worst <= 1e-9,
        format!("loop reference differs by {worst:e}"),
    )?;
    Ok(format!(
        "4ln2 = {four_ln2:.12}, 4ln2-4 = {ortho:.12}; 400 random batches within {worst:.1e} of a loop evaluation"
    ))
}

fn detach_invariant() -> Outcome {
    let gc = GradCheck::default();
    let mut worst = CheckReport::default();
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (h, labels) = random_batch(&mut rng);
        let tau = rng.random_range(0.1..1.0);
        for variant in [SclVariant::ExcludePartner, SclVariant::Supcon] {
            let mut tape = Tape::without_params();
            let live = tape.leaf(h.clone());
            let batch = build_multiview(&mut tape, live, &labels).unwrap();
            let loss = scl_loss(&mut tape, &batch, tau, variant, true).unwrap();
            let grads = tape.backward(loss).unwrap();
            ensure(
                grads.wrt(batch.copy).is_none() && !tape.requires_grad(batch.copy),
                format!("seed {seed}: copy rows carry a gradient"),
            )?;
            let through_x = grads.wrt(batch.x).unwrap();
            ensure(
                through_x.data()[h.numel()..].iter().any(|&g| g != 0.0),
                "copy rows never influenced the loss",
            )?;
            let analytic = grads.wrt_or_zeros(&tape, live);

            // moving only the live rows, with the copies pinned, must explain the whole gradient
            let frozen = h.clone();
            let labels2 = labels.clone();
            let report = gc
                .inputs(
                    std::slice::from_ref(&h),
                    usize::MAX,
                    &mut rng,
                    move |t, v| {
                        let copy = t.constant(frozen.clone());
                        let b = MultiviewBatch::from_views(t, v[0], copy, &labels2)?;
                        scl_loss(t, &b, tau, variant, true)
                    },
                )
                .map_err(|e| e.to_string())?;
            ensure(
                report.passed(gc.rel_tol),
                format!("seed {seed}: {}", report.worst),
            )?;

            let mut t2 = Tape::without_params();
            let l2 = t2.leaf(h.clone());
            let c2 = t2.constant(h.clone());
            let b2 = MultiviewBatch::from_views(&mut t2, l2, c2, &labels).unwrap();
            let loss2 = scl_loss(&mut t2, &b2, tau, variant, true).unwrap();
            let pinned = t2.backward(loss2).unwrap().wrt_or_zeros(&t2, l2);
            ensure(
                analytic == pinned,
                format!("seed {seed}: detach differs from a pinned copy"),
            )?;
            worst.merge(report);
        }
    }
    Ok(format!(
        "copy gradient absent in 100 batches; live gradient vs copy-pinned differences worst rel err {:.1e}",
        worst.max_rel_err
    ))
}

fn singleton_safety() -> Outcome {
    let mut cases = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let n = rng.random_range(2..=8);
        let mut labels: Vec<usize> = (0..n - 1).map(|_| rng.random_range(0..2)).collect();
        labels.insert(rng.random_range(0..n), 2);
        let h = random_tensor(&[n, rng.random_range(2..6)], -1.0, 1.0, &mut rng);
        for variant in [SclVariant::ExcludePartner, SclVariant::Supcon] {
            for tau in [0.07, 1.0] {
                let mut tape = Tape::without_params();
                let live = tape.leaf(h.clone());
                let batch = build_multiview(&mut tape, live, &labels).unwrap();
                let loss =
                    scl_loss(&mut tape, &batch, tau, variant, true).map_err(|e| e.to_string())?;
                let v = tape.value(loss).item().unwrap();
                ensure(v.is_finite(), format!("seed {seed}: loss {v}"))?;
                let g = tape.backward(loss).unwrap().wrt_or_zeros(&tape, live);
                ensure(
                    g.data().iter().all(|x| x.is_finite()),
                    format!("seed {seed}: non-finite gradient"),
                )?;
                cases += 1;
            }
        }
    }
    Ok(format!(
        "{cases} batches with a one-sample class: finite loss and gradients"
    ))
}

// ---------------------------------------------------------------- metrics

fn brute_weighted_f1(y: &[usize], p: &[usize], c: usize) -> f64 {
    let n = y.len() as f64;
    let mut total = 0.0;
    for k in 0..c {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fneg = 0.0;
        for i in 0..y.len() {
            match (y[i] == k, p[i] == k) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fneg += 1.0,
                _ => {}
            }
        }
        let support = tp + fneg;
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if support > 0.0 { tp / support } else { 0.0 };
        let f = if prec + rec > 0.0 {
            2.0 * prec * rec / (prec + rec)
        } else {
            0.0
        };
        total += support / n * f;
    }
    total
}

fn brute_micro_excluding(y: &[usize], p: &[usize], ex: usize) -> Option<f64> {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for i in 0..y.len() {
        if y[i] == p[i] {
            if y[i] != ex {
                tp += 1.0;
            }
        } else {
            if p[i] != ex {
                fp += 1.0;
            }
            if y[i] != ex {
                fneg += 1.0;
            }
        }
    }
    if tp + fneg == 0.0 {
        return None;
    }
    let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let rec = tp / (tp + fneg);
    Some(if prec + rec > 0.0 {
        2.0 * prec * rec / (prec + rec)
    } else {
        0.0
    })
}

fn metric_oracles() -> Outcome {
    let w = weighted_f1(&[0, 0, 1, 1, 2], &[0, 1, 1, 1, 2], 3).unwrap();
    ensure((w - 0.78667).abs() < 5e-6, format!("weighted example {w}"))?;
    let m = micro_f1_excluding(&[0, 0, 1, 2], &[0, 1, 1, 2], 3, 0).unwrap();
    ensure((m - 0.8).abs() < 1e-12, format!("micro example {m}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut undefined = 0;
    for case in 0..1000 {
        let c = rng.random_range(1..=8);
        let n = rng.random_range(1..=50);
        // skewed draws so some cases have absent classes or only the excluded one
        let skew = rng.random_range(1..=c);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..skew)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let a = weighted_f1(&y, &p, c).map_err(|e| e.to_string())?;
        let b = brute_weighted_f1(&y, &p, c);
        ensure(
            (a - b).abs() <= 1e-12,
            format!("case {case}: weighted {a} vs {b}"),
        )?;
        let ex = rng.random_range(0..c);
        match (
            micro_f1_excluding(&y, &p, c, ex),
            brute_micro_excluding(&y, &p, ex),
        ) {
            (Ok(a), Some(b)) => ensure(
                (a - b).abs() <= 1e-12,
                format!("case {case}: micro {a} vs {b}"),
            )?,
            (Err(_), None) => undefined += 1,
            (a, b) => return Err(format!("case {case}: micro {a:?} vs {b:?}")),
        }
    }
    Ok(format!(
        "1000 random cases equal to brute-force counters ({undefined} with only the excluded label, undefined in both)"
    ))
}

// ---------------------------------------------------------------- seq model

fn causality_and_padding() -> Outcome {
    let mut worst_causal: f64 = 0.0;
    let mut worst_pad: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let (store, model) = random_seq(&mut rng);
        let v = model.config().vocab_size;
        let len = rng.random_range(1..7);
        let src = tokens(&mut rng, v, len, false);
        let mut target = framed(&mut rng, v);
        let k = rng.random_range(1..target.len());
        let mut changed = target.clone();
        changed[k] = (changed[k] + rng.random_range(1..v)) % v;
        target[0] = BOS_ID;

        let mut tape = Tape::new(&store);
        let enc = model.encode(&mut tape, &src).map_err(|e| e.to_string())?;
        let a = model
            .decode_logits(&mut tape, &enc, &target)
            .map_err(|e| e.to_string())?;
        let b = model
            .decode_logits(&mut tape, &enc, &changed)
            .map_err(|e| e.to_string())?;
        let (a, b) = (tape.value(a), tape.value(b));
        ensure(
            a.data().iter().all(|x| x.is_finite()),
            format!("seed {seed}: non-finite logits"),
        )?;
        for j in 0..k {
            for c in 0..v {
                worst_causal = worst_causal.max((a.at(j, c) - b.at(j, c)).abs());
            }
        }

        let mut padded = src.clone();
        padded.extend(std::iter::repeat_n(PAD_ID, rng.random_range(1..5)));
        let e1 = model.encode(&mut tape, &src).unwrap();
        let e2 = model.encode(&mut tape, &padded).unwrap();
        worst_pad = worst_pad.max(tape.value(e1.pooled).max_abs_diff(tape.value(e2.pooled)));
        let (h1, h2) = (tape.value(e1.hidden), tape.value(e2.hidden));
        for i in 0..src.len() {
            for j in 0..h1.cols() {
                worst_pad = worst_pad.max((h1.at(i, j) - h2.at(i, j)).abs());
            }
        }
    }
    ensure(
        worst_causal <= 1e-12,
        format!("causality violated by {worst_causal:e}"),
    )?;
    ensure(
        worst_pad <= 1e-10,
        format!("padding moved outputs by {worst_pad:e}"),
    )?;
    Ok(format!(
        "100 random models: earlier rows moved {worst_causal:.1e} (tol 1e-12), padding moved {worst_pad:.1e} (tol 1e-10)"
    ))
}

// ---------------------------------------------------------------- end to end

fn write_synthetic(dir: &Path, name: &str, corpus: &[erc_core::text::Dialogue]) -> PathBuf {
    let path = dir.join(name);
    write_corpus(
        corpus,
        &synthetic::labels(),
        fs::File::create(&path).unwrap(),
    )
    .unwrap();
    path
}

const SYNTH_HEADER: &str = r#"
dataset = "custom"
labels = ["joy", "anger", "sadness", "fear"]
train_path = "train.jsonl"
dev_path = "dev.jsonl"
out_dir = "out"
"#;

fn end_to_end_overfit() -> Outcome {
    let start = Instant::now();
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_synthetic(dir, "train.jsonl", &synthetic::cue_corpus(40, 5, 1));
    write_synthetic(dir, "dev.jsonl", &synthetic::cue_corpus(20, 5, 2));
    let config = dir.join("run.toml");
    fs::write(
        &config,
        format!(
            "{SYNTH_HEADER}seeds = [0]\n[loss]\nalpha = 0.2\nbeta = 0.1\n[optim]\nepochs = 40\n"
        ),
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    erc_ok(&["train", "--config", cfg])?;
    let out = dir.join("out");
    let metrics = read_json(&out.join("metrics.json"))?;
    let best = metrics["best_dev_score"]
        .as_f64()
        .ok_or("no best_dev_score")?;
    let best_epoch = metrics["best_epoch"].as_u64().unwrap_or(0);

    let ckpt = out.join("checkpoint.best");
    let ckpt = ckpt.to_str().unwrap();
    erc_ok(&[
        "evaluate",
        "--config",
        cfg,
        "--split",
        "train",
        "--checkpoint",
        ckpt,
        "--out",
        dir.join("eval-train").to_str().unwrap(),
    ])?;
    let train_acc = read_json(&dir.join("eval-train/metrics.json"))?["micro_f1"]
        .as_f64()
        .ok_or("no micro_f1")?;
    erc_ok(&[
        "evaluate",
        "--config",
        cfg,
        "--split",
        "dev",
        "--checkpoint",
        ckpt,
        "--out",
        dir.join("eval-dev").to_str().unwrap(),
    ])?;
    let reproduced = read_json(&dir.join("eval-dev/metrics.json"))?["weighted_avg_f1"]
        .as_f64()
        .ok_or("no weighted_avg_f1")?;
    let history = fs::read_to_string(out.join("history.jsonl")).map_err(|e| e.to_string())?;
    let logged_best = history
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter_map(|v| v["best_dev_score"].as_f64())
        .next_back()
        .ok_or("empty history")?;
    let elapsed = start.elapsed();
    ensure(train_acc >= 0.95, format!("train accuracy {train_acc}"))?;
    ensure(
        reproduced == best && best == logged_best,
        format!("best dev {best} / logged {logged_best} / re-evaluated {reproduced}"),
    )?;
    ensure(
        elapsed < Duration::from_secs(300),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "train accuracy {train_acc:.3} from the best checkpoint (epoch {best_epoch} of 40); dev F1 {best} reproduced exactly; {:.0}s",
        elapsed.as_secs_f64()
    ))
}

fn ablation_mechanics() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_synthetic(dir, "train.jsonl", &synthetic::cue_corpus(6, 5, 3));
    write_synthetic(dir, "dev.jsonl", &synthetic::cue_corpus(3, 5, 4));
    let config = dir.join("run.toml");
    fs::write(
        &config,
        format!(
            "{SYNTH_HEADER}window_size = 3\nseeds = [0, 1]\n[model]\nd_model = 8\nheads = 2\ndialogue_heads = 2\nffn_dim = 8\nencoder_layers = 1\ndecoder_layers = 1\nmax_len = 12\n[optim]\nepochs = 2\n"
        ),
    )
    .unwrap();
    erc_ok(&["ablate", "--config", config.to_str().unwrap()])?;
    let report = read_json(&dir.join("out/ablation.json"))?;
    let rows = report["rows"].as_array().ok_or("no rows")?;
    let names: Vec<&str> = rows.iter().filter_map(|r| r["name"].as_str()).collect();
    let expected = [
        "full",
        "-Gen",
        "-SCL",
        "-Speaker",
        "-Gen-SCL",
        "-SCL-Speaker",
        "-Gen-Speaker",
        "-Dialog-Trans",
    ];
    ensure(names == expected, format!("rows {names:?}"))?;
    let mut epochs_checked = 0;
    for (row, slug) in rows.iter().zip([
        "full",
        "no-gen",
        "no-scl",
        "no-speaker",
        "no-gen-scl",
        "no-scl-speaker",
        "no-gen-speaker",
        "no-dialog-trans",
    ]) {
        let name = row["name"].as_str().unwrap();
        ensure(
            row["component_check"]["passed"].as_bool() == Some(true),
            format!("{name}: {}", row["component_check"]),
        )?;
        ensure(
            row["dev_scores"].as_array().map(Vec::len) == Some(2),
            format!("{name}: seeds not averaged"),
        )?;
        let use_gen = row["toggles"]["use_gen"].as_bool().unwrap();
        let use_scl = row["toggles"]["use_scl"].as_bool().unwrap();
        ensure(
            use_gen || row["beta"].as_f64() == Some(0.0),
            format!("{name}: beta not zeroed"),
        )?;
        ensure(
            use_scl || row["alpha"].as_f64() == Some(0.0),
            format!("{name}: alpha not zeroed"),
        )?;
        // read the logs directly as well
        for seed in [0, 1] {
            let path = dir.join(format!("out/{slug}/seed-{seed}/history.jsonl"));
            let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            for line in text.lines() {
                let r: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
                let w = &r["weights"];
                let sum = w["ce"].as_f64().unwrap()
                    + w["scl"].as_f64().unwrap()
                    + w["gen"].as_f64().unwrap();
                ensure(
                    (sum - 1.0).abs() <= 1e-12,
                    format!("{name}: mean weights sum to {sum}"),
                )?;
                ensure(
                    r["max_weight_sum_error"].as_f64().unwrap() <= 1e-12,
                    format!("{name}: weight sum error"),
                )?;
                for (on, key) in [(use_gen, "gen"), (use_scl, "scl")] {
                    if !on {
                        ensure(
                            r["weights"][key].as_f64() == Some(0.0)
                                && r["contribution"][key].as_f64() == Some(0.0)
                                && r[format!("loss_{key}")].is_null(),
                            format!("{name}: disabled {key} contributed"),
                        )?;
                    }
                }
                epochs_checked += 1;
            }
        }
    }
    Ok(format!(
        "8 rows x 2 seeds; {epochs_checked} epoch logs show weights summing to 1 and removed losses contributing 0"
    ))
}

fn context_sensitivity() -> Outcome {
    let start = Instant::now();
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_synthetic(dir, "train.jsonl", &synthetic::context_corpus(40, 6, 1));
    write_synthetic(dir, "dev.jsonl", &synthetic::context_corpus(20, 6, 2));
    let body = "seeds = [0, 1, 2, 3, 4]\n[model]\nd_model = 32\nheads = 2\ndialogue_heads = 2\nffn_dim = 64\nencoder_layers = 1\ndecoder_layers = 1\n[optim]\nepochs = 40\nlr = 2e-3\n";
    let mut means = Vec::new();
    for (name, use_dt) in [("full", true), ("no-dialog-trans", false)] {
        let config = dir.join(format!("{name}.toml"));
        fs::write(
            &config,
            format!("{SYNTH_HEADER}{body}[ablation]\nuse_dialog_trans = {use_dt}\n")
                .replace("out_dir = \"out\"", &format!("out_dir = \"{name}\"")),
        )
        .unwrap();
        erc_ok(&["train", "--config", config.to_str().unwrap()])?;
        let summary = read_json(&dir.join(name).join("summary.json"))?;
        let scores: Vec<f64> = summary["seeds"]
            .as_array()
            .ok_or("no seeds")?
            .iter()
            .filter_map(|s| s["dev_score"].as_f64())
            .collect();
        ensure(scores.len() == 5, format!("{name}: {} seeds", scores.len()))?;
        means.push(summary["mean_dev_score"].as_f64().ok_or("no mean")?);
    }
    ensure(
        means[0] > means[1],
        format!(
            "full {:.4} does not exceed -Dialog-Trans {:.4}",
            means[0], means[1]
        ),
    )?;
    Ok(format!(
        "mean dev weighted F1 over 5 seeds: full {:.4} > -Dialog-Trans {:.4}; {:.0}s",
        means[0],
        means[1],
        start.elapsed().as_secs_f64()
    ))
}

fn fixture_counts() -> Outcome {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/meld/manifest.json");
    let out = erc_ok(&["data-stats", "--manifest", manifest.to_str().unwrap()])?;
    ensure(
        out.contains("all counts match"),
        "manifest check did not report a match",
    )?;
    let checks = out
        .lines()
        .filter(|l| l.trim_start().starts_with("ok "))
        .count();

    // a wrong count must be caught
    let tmp = TempDir::new().unwrap();
    let fixtures = manifest.parent().unwrap();
    for f in fs::read_dir(fixtures).unwrap() {
        let f = f.unwrap().path();
        fs::copy(&f, tmp.path().join(f.file_name().unwrap())).unwrap();
    }
    let mut m = read_json(&manifest)?;
    let n = m["splits"]["dev"]["utterances"].as_u64().unwrap();
    m["splits"]["dev"]["utterances"] = (n + 1).into();
    let bad = tmp.path().join("manifest.json");
    fs::write(&bad, m.to_string()).unwrap();
    let status = erc(&["data-stats", "--manifest", bad.to_str().unwrap()]).status;
    ensure(
        status.code() == Some(3),
        format!("tampered manifest gave {status:?}"),
    )?;
    Ok(format!(
        "{checks} counts match the MELD-format fixture manifest; a tampered count exits 3"
    ))
}

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("contrastive loss hand oracles", scl_oracles),
        ("detach invariant", detach_invariant),
        ("singleton-class safety", singleton_safety),
        ("metric oracles", metric_oracles),
        (
            "decoder causality and pad invariance",
            causality_and_padding,
        ),
        (
            "end-to-end overfit and checkpoint round trip",
            end_to_end_overfit,
        ),
        ("ablation mechanics", ablation_mechanics),
        ("context sensitivity", context_sensitivity),
        ("fixture counts", fixture_counts),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("[PASS] {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

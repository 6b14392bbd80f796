//! `data-stats`: corpus counts, optionally checked against a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use erc_core::text::{corpus_stats, load_corpus, published_split_sizes, CorpusStats, LabelMap};
use erc_core::train::{RunConfig, TrainError};
use serde::{Deserialize, Serialize};

#[derive(Args, Clone)]
pub struct StatsArgs {
    /// Count the splits named in a run configuration.
    #[arg(long, conflicts_with_all = ["data", "manifest"])]
    config: Option<PathBuf>,
    /// Corpus files (JSONL or MELD CSV).
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Label set of `--data` files.
    #[arg(long, default_value = "meld")]
    dataset: String,
    /// JSON manifest of expected counts; any mismatch exits with status 3.
    #[arg(long, conflicts_with = "data")]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct ManifestSplit {
    pub file: PathBuf,
    pub dialogues: usize,
    pub utterances: usize,
    #[serde(default)]
    pub per_class: Option<BTreeMap<String, usize>>,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct Manifest {
    pub dataset: String,
    pub splits: BTreeMap<String, ManifestSplit>,
}

fn labels_for(dataset: &str) -> Result<LabelMap, TrainError> {
    let cfg = RunConfig {
        dataset: dataset.to_string(),
        ..RunConfig::default()
    };
    cfg.label_map()
}

fn print_stats(name: &str, path: &Path, stats: &CorpusStats) {
    println!(
        "{name:<8} {:>6} dialogues {:>7} utterances  ({})",
        stats.num_dialogues,
        stats.num_utterances,
        path.display()
    );
    let per: Vec<String> = stats
        .per_class
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    println!("         {}", per.join(" "));
}

fn print_published(dataset: &str) {
    if let Some(sizes) = published_split_sizes(dataset) {
        println!("published {dataset} sizes (dialogues/utterances):");
        for (name, (d, u)) in ["train", "dev", "test"].iter().zip(sizes) {
            println!("  {name:<6} {d}/{u}");
        }
    }
}

pub fn run(args: StatsArgs) -> Result<(), TrainError> {
    if let Some(path) = &args.manifest {
        return check_manifest(path);
    }
    if let Some(path) = &args.config {
        let cfg = RunConfig::load(path)?;
        let labels = cfg.label_map()?;
        let mut splits = vec![("train", cfg.train_path.clone())];
        splits.extend(cfg.dev_path.clone().map(|p| ("dev", p)));
        splits.extend(cfg.test_path.clone().map(|p| ("test", p)));
        for (name, p) in splits {
            print_stats(name, &p, &corpus_stats(&load_corpus(&p, &labels)?, &labels));
        }
        print_published(&cfg.dataset);
        return Ok(());
    }
    if args.data.is_empty() {
        return Err(TrainError::Config(
            "pass --config, --data or --manifest".into(),
        ));
    }
    let labels = labels_for(&args.dataset)?;
    for p in &args.data {
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
        print_stats(name, p, &corpus_stats(&load_corpus(p, &labels)?, &labels));
    }
    print_published(&args.dataset);
    Ok(())
}

fn check_manifest(path: &Path) -> Result<(), TrainError> {
    let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| TrainError::Config(format!("bad manifest: {e}")))?;
    let labels = labels_for(&manifest.dataset)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut mismatches = Vec::new();
    for (name, split) in &manifest.splits {
        let file = base.join(&split.file);
        let stats = corpus_stats(&load_corpus(&file, &labels)?, &labels);
        print_stats(name, &file, &stats);
        let mut check = |what: &str, got: usize, want: usize| {
            let ok = got == want;
            println!(
                "  {} {name} {what}: {got} (manifest {want})",
                if ok { "ok " } else { "BAD" }
            );
            if !ok {
                mismatches.push(format!("{name} {what}"));
            }
        };
        check("dialogues", stats.num_dialogues, split.dialogues);
        check("utterances", stats.num_utterances, split.utterances);
        if let Some(per) = &split.per_class {
            for (label, &want) in per {
                check(
                    label,
                    stats.per_class.get(label).copied().unwrap_or(0),
                    want,
                );
            }
        }
    }
    if mismatches.is_empty() {
        println!("all counts match {}", path.display());
        Ok(())
    } else {
        Err(TrainError::Data(format!(
            "counts differ from the manifest: {}",
            mismatches.join(", ")
        )))
    }
}

//! `erc`: train, evaluate and inspect the emotion-recognition model.

mod stats;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use erc_core::synthetic;
use erc_core::text::{convert_meld_csv, write_corpus};
use erc_core::train::runner::{CHECKPOINT_FILE, EMBEDDINGS_FILE, METRICS_FILE};
use erc_core::train::{self, RunConfig, TrainError};

#[derive(Parser)]
#[command(
    name = "erc",
    version,
    about = "Emotion recognition in conversation: toy encoder-decoder trainer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Shared {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Replaces the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Args, Clone)]
struct Source {
    /// Checkpoint to load; defaults to `<out>/checkpoint.best`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Configured split to score.
    #[arg(long, value_enum, default_value = "test", conflicts_with = "data")]
    split: Split,
    /// Corpus file to score instead of a configured split.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Cue,
    Context,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed, keeping the best-dev checkpoint.
    Train(Shared),
    /// Score a split with a checkpoint and write metrics.json.
    Evaluate {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        source: Source,
    },
    /// Run the eight-row ablation matrix and write ablation.json.
    Ablate(Shared),
    /// Write contextualized utterance vectors as embeddings.tsv.
    DumpEmbeddings {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        source: Source,
    },
    /// Dialogue, utterance and per-class counts of corpus files.
    DataStats(stats::StatsArgs),
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long, value_enum, default_value = "cue")]
        kind: SynthKind,
        #[arg(long, default_value_t = 40)]
        dialogues: usize,
        #[arg(long, default_value_t = 5)]
        turns: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a MELD CSV release file to JSONL dialogues.
    ConvertMeld {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn load_config(shared: &Shared) -> Result<RunConfig, TrainError> {
    let mut cfg = RunConfig::load(&shared.config)?;
    if let Some(seed) = shared.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &shared.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn resolve_source(cfg: &RunConfig, source: &Source) -> Result<(PathBuf, PathBuf), TrainError> {
    let ckpt = source
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
    let data = match (&source.data, source.split) {
        (Some(p), _) => p.clone(),
        (None, Split::Train) => cfg.train_path.clone(),
        (None, Split::Dev) => cfg
            .dev_path
            .clone()
            .unwrap_or_else(|| cfg.train_path.clone()),
        (None, Split::Test) => cfg.test_path.clone().ok_or_else(|| {
            TrainError::Config("no test_path configured; pass --split or --data".into())
        })?,
    };
    Ok((ckpt, data))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(path).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<(), TrainError> {
    match cli.command {
        Command::Train(shared) => {
            let cfg = load_config(&shared)?;
            let summary = train::train(&cfg)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("serializable")
            );
        }
        Command::Evaluate { shared, source } => {
            let cfg = load_config(&shared)?;
            let (ckpt, data) = resolve_source(&cfg, &source)?;
            let report = train::evaluate(&ckpt, &data, Some(&cfg.label_map()?))?;
            create_dir(&cfg.out_dir)?;
            write_json(&cfg.out_dir.join(METRICS_FILE), &report)?;
            println!("{}: {}", report.primary_name(), report.primary());
        }
        Command::Ablate(shared) => {
            let cfg = load_config(&shared)?;
            let report = train::ablate(&cfg)?;
            for row in &report.rows {
                println!(
                    "{:<14} dev {:.4}{}",
                    row.name,
                    row.mean_dev_score,
                    row.mean_test_score
                        .map(|t| format!("  test {t:.4}"))
                        .unwrap_or_default()
                );
            }
        }
        Command::DumpEmbeddings { shared, source } => {
            let cfg = load_config(&shared)?;
            let (ckpt, data) = resolve_source(&cfg, &source)?;
            create_dir(&cfg.out_dir)?;
            let out = cfg.out_dir.join(EMBEDDINGS_FILE);
            let rows = train::dump_embeddings(&ckpt, &data, &out, Some(&cfg.label_map()?))?;
            println!("wrote {rows} rows to {}", out.display());
        }
        Command::DataStats(args) => stats::run(args)?,
        Command::Synth {
            kind,
            dialogues,
            turns,
            seed,
            out,
        } => {
            let corpus = match kind {
                SynthKind::Cue => synthetic::cue_corpus(dialogues, turns, seed),
                SynthKind::Context => synthetic::context_corpus(dialogues, turns, seed),
            };
            let file = fs::File::create(&out).map_err(|e| TrainError::Io {
                path: out.display().to_string(),
                source: e,
            })?;
            write_corpus(&corpus, &synthetic::labels(), file).map_err(|e| TrainError::Io {
                path: out.display().to_string(),
                source: e,
            })?;
            println!("labels: {}", synthetic::LABELS.join(", "));
        }
        Command::ConvertMeld { input, output } => {
            let io = |p: &Path| {
                let p = p.display().to_string();
                move |e| TrainError::Io { path: p, source: e }
            };
            let r = fs::File::open(&input).map_err(io(&input))?;
            let w = fs::File::create(&output).map_err(io(&output))?;
            let n = convert_meld_csv(std::io::BufReader::new(r), std::io::BufWriter::new(w))?;
            println!("converted {n} dialogues");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

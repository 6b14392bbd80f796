//! Corpus ingestion, vocabulary, speaker-spliced tokenization and windowing.
//!
//! The canonical corpus format is JSONL with one dialogue per line:
//!
//! ```text
//! {"dialogue_id": "d0", "utterances": [{"speaker": "joey", "text": "hi", "label": "joy"}]}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const PAD_ID: usize = 2;
pub const UNK_ID: usize = 3;
/// Token placed between the speaker name and the utterance text.
pub const SPEAKER_SEP: &str = ":";

pub const DEFAULT_MAX_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown label {label:?} (expected one of {known:?})")]
    Label {
        line: usize,
        label: String,
        known: Vec<String>,
    },
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TextError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub speaker: String,
    pub text: String,
    pub label: usize,
    pub dialogue_id: String,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Emotion label inventory of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    names: Vec<String>,
    excluded: Option<String>,
}

impl LabelMap {
    pub fn new(names: Vec<String>, excluded: Option<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(TextError::Config(
                "label map needs at least one label".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(TextError::Config(format!("duplicate label {n:?}")));
            }
        }
        if let Some(e) = &excluded {
            if !names.contains(e) {
                return Err(TextError::Config(format!(
                    "excluded label {e:?} is not in the label set"
                )));
            }
        }
        Ok(Self { names, excluded })
    }

    fn preset(names: &[&str], excluded: Option<&str>) -> Self {
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            excluded: excluded.map(str::to_string),
        }
    }

    pub fn meld() -> Self {
        Self::preset(
            &[
                "neutral", "surprise", "fear", "sadness", "joy", "disgust", "anger",
            ],
            None,
        )
    }

    pub fn emorynlp() -> Self {
        Self::preset(
            &[
                "joyful", "neutral", "powerful", "mad", "sad", "scared", "peaceful",
            ],
            None,
        )
    }

    /// Ekman's six basic emotions plus neutral; neutral is excluded from
    /// the micro-F1 used for model selection.
    pub fn dailydialog() -> Self {
        Self::preset(
            &[
                "neutral",
                "happiness",
                "surprise",
                "anger",
                "disgust",
                "fear",
                "sadness",
            ],
            Some("neutral"),
        )
    }

    pub fn iemocap() -> Self {
        Self::preset(
            &["excited", "neutral", "frustrated", "sad", "happy", "angry"],
            None,
        )
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        let name = name.trim();
        self.names
            .iter()
            .position(|n| n == name)
            .or_else(|| self.names.iter().position(|n| n.eq_ignore_ascii_case(name)))
    }

    pub fn excluded(&self) -> Option<&str> {
        self.excluded.as_deref()
    }

    pub fn excluded_id(&self) -> Option<usize> {
        self.excluded.as_deref().and_then(|e| self.id(e))
    }
}

#[derive(Serialize, Deserialize)]
struct RawUtterance {
    speaker: String,
    text: String,
    label: String,
}

#[derive(Serialize, Deserialize)]
struct RawDialogue {
    dialogue_id: String,
    utterances: Vec<RawUtterance>,
}

/// Loads a JSONL corpus, or a MELD-style CSV when the extension is `.csv`.
pub fn load_corpus(path: impl AsRef<Path>, labels: &LabelMap) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let mut jsonl = Vec::new();
        convert_meld_csv(BufReader::new(file), &mut jsonl)?;
        parse_corpus(jsonl.as_slice(), labels)
    } else {
        parse_corpus(BufReader::new(file), labels)
    }
}

/// Parses JSONL dialogues. Blank lines are skipped; line numbers are 1-based.
pub fn parse_corpus(reader: impl BufRead, labels: &LabelMap) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| TextError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDialogue = serde_json::from_str(&line).map_err(|e| TextError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if raw.utterances.is_empty() {
            return Err(TextError::Parse {
                line: line_no,
                msg: format!("dialogue {:?} has no utterances", raw.dialogue_id),
            });
        }
        let utterances = raw
            .utterances
            .into_iter()
            .enumerate()
            .map(|(index, u)| {
                let label = labels.id(&u.label).ok_or_else(|| TextError::Label {
                    line: line_no,
                    label: u.label.clone(),
                    known: labels.names().to_vec(),
                })?;
                Ok(Utterance {
                    speaker: u.speaker,
                    text: u.text,
                    label,
                    dialogue_id: raw.dialogue_id.clone(),
                    index,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Dialogue {
            dialogue_id: raw.dialogue_id,
            utterances,
        });
    }
    Ok(out)
}

pub fn write_corpus(
    dialogues: &[Dialogue],
    labels: &LabelMap,
    mut writer: impl Write,
) -> std::io::Result<()> {
    for d in dialogues {
        let raw = RawDialogue {
            dialogue_id: d.dialogue_id.clone(),
            utterances: d
                .utterances
                .iter()
                .map(|u| RawUtterance {
                    speaker: u.speaker.clone(),
                    text: u.text.clone(),
                    label: labels.name(u.label).to_string(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut writer, &raw)?;
        writeln!(writer)?;
    }
    Ok(())
}

/// Lowercases and splits on whitespace; every punctuation character is a
/// token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && ch != '_') {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Token sequence an utterance contributes between its frame tokens.
pub fn utterance_tokens(u: &Utterance, use_speaker: bool) -> Vec<String> {
    let mut toks = Vec::new();
    if use_speaker {
        toks.extend(tokenize(&u.speaker));
        toks.push(SPEAKER_SEP.to_string());
    }
    toks.extend(tokenize(&u.text));
    toks
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from already-counted frequencies: descending count, ties
    /// broken lexicographically.
    fn from_counts(counts: BTreeMap<String, usize>, min_freq: usize) -> Self {
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = [BOS, EOS, PAD, UNK]
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens).expect("reserved tokens present")
    }

    /// Vocabulary over the tokens of raw texts.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts = BTreeMap::new();
        for t in texts {
            for tok in tokenize(t) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        Self::from_counts(counts, min_freq)
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let reserved = [BOS, EOS, PAD, UNK];
        if tokens.len() < 4 || tokens[..4].iter().zip(reserved).any(|(a, b)| a != b) {
            return Err(TextError::Config(
                "vocabulary must start with the four reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(TextError::Config(format!(
                    "duplicate vocabulary token {t:?}"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }
}

/// Vocabulary over everything `encode_utterance` can emit with speakers on.
pub fn build_vocab(corpus: &[Dialogue], min_freq: usize) -> Result<Vocab> {
    if corpus.iter().all(Dialogue::is_empty) {
        return Err(TextError::Config(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut counts = BTreeMap::new();
    for u in corpus.iter().flat_map(|d| &d.utterances) {
        for tok in utterance_tokens(u, true) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    Ok(Vocab::from_counts(counts, min_freq))
}

/// `[<s>, speaker.., ":", text.., </s>]`, or without the speaker part when
/// `use_speaker` is off. Truncation to `max_len` keeps the closing `</s>`.
pub fn encode_utterance(
    u: &Utterance,
    vocab: &Vocab,
    use_speaker: bool,
    max_len: usize,
) -> Vec<usize> {
    let max_len = max_len.max(2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS_ID);
    ids.extend(
        utterance_tokens(u, use_speaker)
            .iter()
            .map(|t| vocab.id(t))
            .take(max_len - 2),
    );
    ids.push(EOS_ID);
    ids
}

/// Non-overlapping consecutive chunks of at most `window` utterances.
pub fn make_windows(d: &Dialogue, window: usize) -> Result<Vec<&[Utterance]>> {
    if window < 2 {
        return Err(TextError::Config(format!(
            "window size must be at least 2, got {window}"
        )));
    }
    Ok(d.utterances.chunks(window).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_dialogues: usize,
    pub num_utterances: usize,
    pub num_classes: usize,
    pub per_class: BTreeMap<String, usize>,
}

pub fn corpus_stats(corpus: &[Dialogue], labels: &LabelMap) -> CorpusStats {
    let mut per_class: BTreeMap<String, usize> =
        labels.names().iter().map(|n| (n.clone(), 0)).collect();
    let mut num_utterances = 0;
    for u in corpus.iter().flat_map(|d| &d.utterances) {
        num_utterances += 1;
        *per_class
            .get_mut(labels.name(u.label))
            .expect("label in map") += 1;
    }
    CorpusStats {
        num_dialogues: corpus.len(),
        num_utterances,
        num_classes: labels.len(),
        per_class,
    }
}

/// Published split sizes of the four standard benchmarks, as
/// `(dialogues, utterances)` for train, dev and test.
pub fn published_split_sizes(dataset: &str) -> Option<[(usize, usize); 3]> {
    match dataset.to_ascii_lowercase().as_str() {
        "dailydialog" => Some([(11118, 87170), (1000, 8069), (1000, 7740)]),
        "meld" => Some([(1038, 9989), (114, 1109), (280, 2610)]),
        "emorynlp" => Some([(713, 9934), (99, 1344), (85, 1328)]),
        "iemocap" => Some([(120, 5810), (120, 5810), (31, 1623)]),
        _ => None,
    }
}

/// Converts the MELD CSV release (`Utterance`, `Speaker`, `Emotion`,
/// `Dialogue_ID`, `Utterance_ID` columns) into JSONL dialogues.
pub fn convert_meld_csv(input: impl Read, output: impl Write) -> Result<usize> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| TextError::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| TextError::Parse {
                line: 1,
                msg: format!("missing column {name:?}"),
            })
    };
    let (c_text, c_speaker, c_emotion, c_dia, c_utt) = (
        col("Utterance")?,
        col("Speaker")?,
        col("Emotion")?,
        col("Dialogue_ID")?,
        col("Utterance_ID")?,
    );
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(usize, RawUtterance)>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| TextError::Parse {
            line,
            msg: e.to_string(),
        })?;
        let get = |c: usize| rec.get(c).unwrap_or("").trim().to_string();
        let utt_id: usize = get(c_utt).parse().map_err(|_| TextError::Parse {
            line,
            msg: format!("bad Utterance_ID {:?}", get(c_utt)),
        })?;
        let dia = get(c_dia);
        if !groups.contains_key(&dia) {
            order.push(dia.clone());
        }
        groups.entry(dia).or_default().push((
            utt_id,
            RawUtterance {
                speaker: get(c_speaker),
                text: get(c_text),
                label: get(c_emotion).to_lowercase(),
            },
        ));
    }
    let mut output = output;
    for dia in &order {
        let mut utts = groups.remove(dia).unwrap_or_default();
        utts.sort_by_key(|(k, _)| *k);
        let raw = RawDialogue {
            dialogue_id: dia.clone(),
            utterances: utts.into_iter().map(|(_, u)| u).collect(),
        };
        serde_json::to_writer(&mut output, &raw)
            .and_then(|_| writeln!(output).map_err(serde_json::Error::io))
            .map_err(|e| TextError::Parse {
                line: 0,
                msg: e.to_string(),
            })?;
    }
    Ok(order.len())
}

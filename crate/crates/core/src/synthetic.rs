//! Generated corpora with known structure, for smoke tests and demos.
//!
//! * Cue corpus: every utterance carries one cue word that determines its
//!   label.
//! * Context corpus: each dialogue has one mood; even turns carry a cue for
//!   it, odd turns are an ambiguous reply whose label is the mood. Only a
//!   model that reads the surrounding turns can label the replies.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::text::{Dialogue, LabelMap, Utterance};

pub const LABELS: [&str; 4] = ["joy", "anger", "sadness", "fear"];

const CUES: [[&str; 2]; 4] = [
    ["wonderful", "great"],
    ["furious", "annoyed"],
    ["miserable", "lonely"],
    ["terrified", "scared"],
];

const FILLERS: [&str; 12] = [
    "i", "think", "that", "is", "the", "day", "today", "so", "we", "it", "was", "well",
];

const SPEAKERS: [&str; 2] = ["alice", "bob"];

const AMBIGUOUS: [&str; 3] = ["oh really", "oh , really ?", "really"];

pub fn labels() -> LabelMap {
    LabelMap::new(LABELS.iter().map(|s| s.to_string()).collect(), None).expect("valid labels")
}

fn cue_text(class: usize, rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..=4);
    let mut words: Vec<&str> = (0..n)
        .map(|_| *FILLERS.choose(rng).expect("fillers"))
        .collect();
    let cue = *CUES[class].choose(rng).expect("cues");
    let at = rng.random_range(0..=words.len());
    words.insert(at, cue);
    words.join(" ")
}

fn utterance(
    dialogue_id: &str,
    index: usize,
    speaker: &str,
    text: String,
    label: usize,
) -> Utterance {
    Utterance {
        speaker: speaker.to_string(),
        text,
        label,
        dialogue_id: dialogue_id.to_string(),
        index,
    }
}

/// `dialogues × turns` utterances, labels drawn uniformly, two speakers alternating.
pub fn cue_corpus(dialogues: usize, turns: usize, seed: u64) -> Vec<Dialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dialogues)
        .map(|d| {
            let id = format!("cue-{d}");
            let first = rng.random_range(0..2);
            let utterances = (0..turns)
                .map(|t| {
                    let class = rng.random_range(0..LABELS.len());
                    let text = cue_text(class, &mut rng);
                    utterance(&id, t, SPEAKERS[(first + t) % 2], text, class)
                })
                .collect();
            Dialogue {
                dialogue_id: id,
                utterances,
            }
        })
        .collect()
}

/// Dialogues whose odd turns are ambiguous replies labeled with the
/// dialogue's mood; moods cycle through the classes so they stay balanced.
pub fn context_corpus(dialogues: usize, turns: usize, seed: u64) -> Vec<Dialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dialogues)
        .map(|d| {
            let id = format!("ctx-{d}");
            let mood = (d + rng.random_range(0..LABELS.len())) % LABELS.len();
            let utterances = (0..turns)
                .map(|t| {
                    let speaker = *SPEAKERS.choose(&mut rng).expect("speakers");
                    let text = if t % 2 == 0 {
                        cue_text(mood, &mut rng)
                    } else {
                        AMBIGUOUS.choose(&mut rng).expect("replies").to_string()
                    };
                    utterance(&id, t, speaker, text, mood)
                })
                .collect();
            Dialogue {
                dialogue_id: id,
                utterances,
            }
        })
        .collect()
}

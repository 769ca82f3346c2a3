//! Seeded toy NLI corpus whose labels are decidable from a cue word in the
//! hypothesis, plus a matching random embedding file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const CONTENT: [&str; 32] = [
    "man", "woman", "child", "dog", "cat", "bird", "horse", "girl", "boy", "crowd", "player", "chef", "park", "street", "beach", "kitchen", "field",
    "river", "ball", "car", "bike", "guitar", "hat", "red", "blue", "small", "old", "runs", "sits", "eats", "plays", "sleeps",
];

/// Cue words per label, in three-way label order.
const CUES: [[&str; 2]; 3] = [["indeed", "surely"], ["not", "never"], ["perhaps", "maybe"]];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train_pairs: 200,
            dev_pairs: 60,
            embed_dim: 16,
            seed: 2018,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub premise: String,
    pub hypothesis: String,
    pub label: &'static str,
    pub annotations: Vec<&'static str>,
}

/// Labels cycle through entailment, contradiction, neutral so the classes balance.
pub fn generate_pairs(count: usize, rng: &mut ChaCha8Rng) -> Vec<SynthPair> {
    let labels = crate::data::LabelSet::ThreeWay.names();
    (0..count)
        .map(|i| {
            let label = i % 3;
            let len = rng.gen_range(4..=8);
            let premise: Vec<&str> = (0..len).map(|_| *CONTENT.choose(rng).unwrap()).collect();
            let keep = rng.gen_range(2..=3);
            let mut hypothesis: Vec<&str> = premise.choose_multiple(rng, keep).copied().collect();
            let cue = CUES[label][rng.gen_range(0..2)];
            hypothesis.insert(rng.gen_range(0..=hypothesis.len()), cue);
            let mut annotations = Vec::new();
            if label == 1 {
                annotations.push("negation");
            }
            if len >= 7 {
                annotations.push("long sentence");
            }
            SynthPair {
                premise: premise.join(" "),
                hypothesis: hypothesis.join(" "),
                label: labels[label],
                annotations,
            }
        })
        .collect()
}

fn to_jsonl(pairs: &[SynthPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let row = json!({
            "sentence1": p.premise,
            "sentence2": p.hypothesis,
            "gold_label": p.label,
            "annotations": p.annotations,
        });
        let _ = writeln!(out, "{row}");
    }
    out
}

/// Every word the generator can emit, each with a uniform random vector.
fn embeddings_text(dim: usize, rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    for word in CONTENT.iter().chain(CUES.iter().flatten()) {
        out.push_str(word);
        for _ in 0..dim {
            let _ = write!(out, " {:.6}", rng.gen_range(-1.0..1.0));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthFiles {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub embeddings: PathBuf,
}

pub fn write_synthetic(dir: &Path, spec: &SynthSpec) -> std::io::Result<SynthFiles> {
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let files = SynthFiles {
        train: dir.join("train.jsonl"),
        dev: dir.join("dev.jsonl"),
        embeddings: dir.join("embeddings.txt"),
    };
    fs::write(&files.train, to_jsonl(&generate_pairs(spec.train_pairs, &mut rng)))?;
    fs::write(&files.dev, to_jsonl(&generate_pairs(spec.dev_pairs, &mut rng)))?;
    fs::write(&files.embeddings, embeddings_text(spec.embed_dim, &mut rng))?;
    Ok(files)
}

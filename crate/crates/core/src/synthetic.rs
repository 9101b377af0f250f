//! Synthetic "authors" for smoke tests and desk-scale experiments.
//!
//! Each author spells content words from its own syllable inventory and
//! strings words together with its own sparse Markov chain. All authors
//! share the alphabet and a common set of real function words, so every
//! ablation view of the text is non-trivial.

use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::util::rng_for;

const SHARED_FUNCTION_WORDS: [&str; 16] =
    ["the", "of", "and", "to", "in", "a", "was", "he", "she", "it", "with", "on", "for", "at", "by", "from"];

const SYLLABLE_POOL: [&str; 30] = [
    "ka", "lo", "mi", "ten", "ru", "sa", "vel", "dor", "pi", "qua", "zen", "bri", "ol", "ma", "tu", "fen", "gri", "ho",
    "ja", "ne", "ost", "ply", "rin", "sku", "wa", "yo", "ek", "ish", "und", "cal",
];

#[derive(Debug, Clone)]
pub struct SyntheticAuthor {
    pub name: String,
    words: Vec<String>,
    /// Per word: successor word indices and cumulative weights.
    transitions: Vec<Vec<(usize, f64)>>,
}

impl SyntheticAuthor {
    /// `n_content` invented words plus the shared function words, each word
    /// followed by one of `branching` successors.
    pub fn new(name: &str, seed: u64, n_content: usize, branching: usize) -> Self {
        let mut rng = rng_for(seed, &["synthetic", name]);
        let mut syllables: Vec<&str> = SYLLABLE_POOL.to_vec();
        syllables.shuffle(&mut rng);
        syllables.truncate(8);
        let mut words: Vec<String> = SHARED_FUNCTION_WORDS.iter().map(|w| w.to_string()).collect();
        while words.len() < SHARED_FUNCTION_WORDS.len() + n_content {
            let n = rng.gen_range(1..=3);
            let w: String = (0..n).map(|_| *syllables.choose(&mut rng).unwrap()).collect();
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let transitions = (0..words.len())
            .map(|_| {
                let mut succ: Vec<(usize, f64)> = Vec::with_capacity(branching);
                while succ.len() < branching.min(words.len()) {
                    let k = rng.gen_range(0..words.len());
                    if !succ.iter().any(|(s, _)| *s == k) {
                        succ.push((k, rng.gen_range(0.2..1.0)));
                    }
                }
                let total: f64 = succ.iter().map(|(_, w)| w).sum();
                let mut acc = 0.0;
                for s in &mut succ {
                    acc += s.1 / total;
                    s.1 = acc;
                }
                succ
            })
            .collect();
        Self { name: name.to_string(), words, transitions }
    }

    /// About `n_words` words of text, in sentences ending with ". ".
    pub fn generate(&self, n_words: usize, rng: &mut ChaCha8Rng) -> String {
        let mut out = String::with_capacity(n_words * 6);
        let mut w = rng.gen_range(0..self.words.len());
        for i in 0..n_words {
            out.push_str(&self.words[w]);
            out.push_str(if i + 1 == n_words || rng.gen_bool(0.08) { ". " } else { " " });
            let u: f64 = rng.gen();
            w = self.transitions[w].iter().find(|(_, c)| u < *c).unwrap_or(self.transitions[w].last().unwrap()).0;
        }
        out.pop();
        out
    }

    /// `n_books` books of `words_per_book` words, each its own RNG stream.
    pub fn books(&self, seed: u64, n_books: usize, words_per_book: usize) -> Vec<String> {
        (0..n_books)
            .map(|b| self.generate(words_per_book, &mut rng_for(seed, &["book", &self.name, &b.to_string()])))
            .collect()
    }
}

/// Shape of a generated desk-scale experiment.
#[derive(Debug, Clone)]
pub struct DeskSetup {
    pub authors: Vec<String>,
    pub books_per_author: usize,
    pub words_per_book: usize,
    pub seeds: Vec<u64>,
    pub modes: Vec<&'static str>,
    pub max_epochs: usize,
    pub batches_per_epoch: usize,
    /// Adds an unseen book by the first author as a special evaluation.
    pub special: bool,
}

impl Default for DeskSetup {
    fn default() -> Self {
        Self {
            authors: vec!["alder".into(), "birch".into(), "cedar".into()],
            books_per_author: 4,
            words_per_book: 4000,
            seeds: vec![0, 1, 2],
            modes: vec!["intact"],
            max_epochs: 80,
            batches_per_epoch: 10,
            special: true,
        }
    }
}

/// Writes synthetic books plus corpus and experiment manifests for a tiny
/// model (d=32, 2 layers, 2 heads, context 64, ~300-token BPE) into `dir`.
/// Returns the experiment manifest path.
pub fn write_desk_experiment(dir: &Path, setup: &DeskSetup) -> io::Result<PathBuf> {
    let books_dir = dir.join("books");
    std::fs::create_dir_all(&books_dir)?;
    let mut corpus = serde_json::Map::new();
    for (k, name) in setup.authors.iter().enumerate() {
        let author = SyntheticAuthor::new(name, 7 + k as u64, 30, 3);
        let mut entries = Vec::new();
        for (b, text) in author.books(11, setup.books_per_author, setup.words_per_book).iter().enumerate() {
            let file = format!("{name}_{b}.txt");
            std::fs::write(books_dir.join(&file), text)?;
            entries.push(serde_json::json!({ "title": format!("{name} {b}"), "path": format!("books/{file}") }));
        }
        corpus.insert(name.clone(), entries.into());
    }
    // No Gutenberg markers here, so nothing to strip.
    let corpus = serde_json::json!({ "authors": corpus, "strip": { "line_patterns": [], "block_patterns": [] } });
    std::fs::write(dir.join("corpus.json"), serde_json::to_string_pretty(&corpus)?)?;

    let mut specials = Vec::new();
    if setup.special {
        let first = &setup.authors[0];
        let author = SyntheticAuthor::new(first, 7, 30, 3);
        let text = author.generate(setup.words_per_book / 2, &mut rng_for(99, &["unseen"]));
        std::fs::write(dir.join("unseen.txt"), text)?;
        specials.push(serde_json::json!({
            "name": "unseen", "text": "unseen.txt", "candidates": setup.authors, "strip": false
        }));
    }
    let manifest = serde_json::json!({
        "corpus": "corpus.json",
        "output_dir": "out",
        "modes": setup.modes,
        "seeds": setup.seeds,
        "model": { "context_window": 64, "d_model": 32, "n_layers": 2, "n_heads": 2 },
        "tokenizer": { "kind": "train", "target_vocab": 300 },
        "train": {
            "batches_per_epoch": setup.batches_per_epoch,
            "batch_size": 16,
            "seq_len": 64,
            "lr": 3e-3,
            "loss_threshold": 2.0,
            "max_epochs": setup.max_epochs,
            "eval_every": 1,
            "eval_batch": 16
        },
        "special_evaluations": specials,
        "analysis": { "bootstrap_resamples": 1000 }
    });
    let path = dir.join("experiment.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

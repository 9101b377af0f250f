//! Corpus cleaning, token budgets and proportional sub-sequence sampling.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TokenId;
use crate::util::rng_for;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed source: {0}")]
    MalformedSource(String),
    #[error("insufficient corpus for {author}: {reason}")]
    Insufficient { author: String, reason: String },
    #[error("invalid strip pattern: {0}")]
    Pattern(#[from] regex::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Regex lists applied after the START/END markers are stripped. Line
/// patterns drop whole matching lines; block patterns delete matching spans
/// (which may cross lines).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct StripConfig {
    pub line_patterns: Vec<String>,
    pub block_patterns: Vec<String>,
}

impl Default for StripConfig {
    fn default() -> Self {
        Self {
            line_patterns: vec![
                r"(?i)^\s*chapter\s+([ivxlcdm]+|\d+)\.?\s*$".into(),
                r"^\s*CHAPTER\s+([IVXLCDM]+|\d+)\.?\s+[^a-z]*$".into(),
                r"^\s*(BOOK|PART)\s+([IVXLCDM]+|\d+)\.?\s*$".into(),
                r"(?i)^\s*\[?\s*transcriber'?s?\s+notes?\b.*$".into(),
                r"(?i)^\s*(produced|e-text prepared|prepared) by\b.*$".into(),
                r"(?i)^\s*\[illustration[^\]]*\]\s*$".into(),
            ],
            block_patterns: vec![
                r"(?s)\[Illustration[^\]]*\]".into(),
                r"(?s)\[Transcriber'?s? [Nn]otes?[^\]]*\]".into(),
            ],
        }
    }
}

pub struct Stripper {
    line: Vec<Regex>,
    block: Vec<Regex>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stripped {
    pub text: String,
    pub warning: Option<String>,
}

impl Stripper {
    pub fn new(cfg: &StripConfig) -> Result<Self> {
        Ok(Self {
            line: cfg.line_patterns.iter().map(|p| Regex::new(p)).collect::<std::result::Result<_, _>>()?,
            block: cfg.block_patterns.iter().map(|p| Regex::new(p)).collect::<std::result::Result<_, _>>()?,
        })
    }

    /// Keeps the lines strictly between the `*** START OF` and `*** END OF`
    /// marker lines, then applies the configured removals.
    pub fn strip(&self, raw: &str) -> Result<Stripped> {
        if raw.is_empty() {
            return Err(CorpusError::MalformedSource("empty input".into()));
        }
        let lines: Vec<&str> = raw.lines().collect();
        let start = lines.iter().position(|l| l.contains("*** START OF"));
        let end = lines.iter().position(|l| l.contains("*** END OF"));
        let (body, warning) = match (start, end) {
            (Some(s), Some(e)) if s > e => {
                return Err(CorpusError::MalformedSource(format!(
                    "start marker on line {} follows end marker on line {}",
                    s + 1,
                    e + 1
                )))
            }
            (Some(s), Some(e)) => (lines[s + 1..e].join("\n"), None),
            (Some(s), None) => (lines[s + 1..].join("\n"), Some("end marker missing".to_string())),
            (None, Some(e)) => (lines[..e].join("\n"), Some("start marker missing".to_string())),
            (None, None) => return Ok(Stripped { text: raw.to_string(), warning: Some("no Gutenberg markers found".into()) }),
        };
        let mut text = body;
        for re in &self.block {
            text = re.replace_all(&text, "").into_owned();
        }
        let kept: Vec<&str> = text.lines().filter(|l| !self.line.iter().any(|re| re.is_match(l))).collect();
        Ok(Stripped { text: kept.join("\n").trim_matches('\n').to_string(), warning })
    }
}

/// Stripping with the shipped default patterns.
pub fn strip_gutenberg(raw: &str) -> Result<Stripped> {
    Stripper::new(&StripConfig::default())?.strip(raw)
}

/// Manual trim: drops the first `head` and last `tail` lines.
pub fn trim_lines(text: &str, head: usize, tail: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    let end = lines.len().saturating_sub(tail);
    lines.get(head.min(end)..end).unwrap_or(&[]).join("\n")
}

/// ASCII-only, lowercase, single-spaced, trimmed.
///
/// Non-ASCII letters and digits are removed outright; other non-ASCII
/// characters (dashes, curly quotes, no-break spaces) act as separators.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        let sep = if c.is_ascii() { c.is_ascii_whitespace() } else if c.is_alphanumeric() { continue } else { true };
        if sep {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.push(c.to_ascii_lowercase());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Book {
    pub author_id: String,
    pub title: String,
    pub normalized_text: String,
    pub token_ids: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthorCorpus {
    pub author_id: String,
    pub books: Vec<Book>,
}

impl AuthorCorpus {
    pub fn total_tokens(&self) -> usize {
        self.books.iter().map(|b| b.token_ids.len()).sum()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.books.iter().map(|b| b.token_ids.len()).collect()
    }
}

/// Per author, total tokens without the single longest book (lowest index
/// on ties); the budget is the minimum over authors.
pub fn budget_from_lengths(authors: &[(&str, Vec<usize>)]) -> Result<usize> {
    let mut budget = None;
    for (author, lengths) in authors {
        if lengths.len() < 2 {
            return Err(CorpusError::Insufficient {
                author: author.to_string(),
                reason: format!("{} book(s); at least 2 are required", lengths.len()),
            });
        }
        let longest = lengths.iter().copied().max().unwrap_or(0);
        let total: usize = lengths.iter().sum::<usize>() - longest;
        budget = Some(budget.map_or(total, |b: usize| b.min(total)));
    }
    budget.ok_or_else(|| CorpusError::Insufficient { author: String::new(), reason: "no authors".into() })
}

pub fn compute_token_budget(corpora: &[AuthorCorpus]) -> Result<usize> {
    let lengths: Vec<(&str, Vec<usize>)> = corpora.iter().map(|c| (c.author_id.as_str(), c.lengths())).collect();
    budget_from_lengths(&lengths)
}

/// Splits `total` in proportion to `weights` with the largest-remainder
/// rule, ties to the lowest index.
pub fn largest_remainder(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: u128 = weights.iter().map(|&w| w as u128).sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut shares = Vec::with_capacity(weights.len());
    let mut rems = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let num = w as u128 * total as u128;
        shares.push((num / sum) as usize);
        rems.push((num % sum, i));
    }
    let missing = total - shares.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take(missing) {
        shares[i] += 1;
    }
    shares
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub book: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub seed: u64,
    pub held_out_book: usize,
    pub budget: usize,
    pub per_book: Vec<Slice>,
}

/// Draws the held-out book uniformly; depends only on seed and author so
/// every ablation mode holds out the same book.
pub fn choose_held_out(n_books: usize, seed: u64, author: &str) -> usize {
    rng_for(seed, &["held_out", author]).gen_range(0..n_books)
}

pub fn make_sampling_plan(lengths: &[usize], held_out: usize, budget: usize, seed: u64) -> Result<SamplingPlan> {
    if held_out >= lengths.len() {
        return Err(CorpusError::Insufficient {
            author: String::new(),
            reason: format!("held-out index {held_out} out of range for {} books", lengths.len()),
        });
    }
    let books: Vec<usize> = (0..lengths.len()).filter(|&i| i != held_out).collect();
    let weights: Vec<usize> = books.iter().map(|&i| lengths[i]).collect();
    let available: usize = weights.iter().sum();
    if budget > available {
        return Err(CorpusError::Insufficient {
            author: String::new(),
            reason: format!("budget {budget} exceeds {available} available tokens"),
        });
    }
    let shares = largest_remainder(&weights, budget);
    let mut rng = rng_for(seed, &["plan"]);
    let per_book = books
        .iter()
        .zip(shares)
        .map(|(&book, len)| Slice { book, start: rng.gen_range(0..=lengths[book] - len), len })
        .collect();
    Ok(SamplingPlan { seed, held_out_book: held_out, budget, per_book })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSequence {
    pub token_ids: Vec<TokenId>,
    /// Slices in concatenation order.
    pub provenance: Vec<Slice>,
}

pub fn build_training_sequence(plan: &SamplingPlan, books: &[&[TokenId]]) -> TrainingSequence {
    let mut order: Vec<Slice> = plan.per_book.iter().copied().filter(|s| s.len > 0).collect();
    order.shuffle(&mut rng_for(plan.seed, &["shuffle"]));
    let mut token_ids = Vec::with_capacity(plan.budget);
    for s in &order {
        token_ids.extend_from_slice(&books[s.book][s.start..s.start + s.len]);
    }
    TrainingSequence { token_ids, provenance: order }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatsRow {
    pub author: String,
    pub title: String,
    pub tokens: usize,
}

/// Per-book rows followed by one `Total` row per author.
pub fn corpus_stats(corpora: &[AuthorCorpus]) -> Vec<StatsRow> {
    let mut rows = Vec::new();
    for c in corpora {
        for b in &c.books {
            rows.push(StatsRow { author: c.author_id.clone(), title: b.title.clone(), tokens: b.token_ids.len() });
        }
        if !c.books.is_empty() {
            rows.push(StatsRow { author: c.author_id.clone(), title: "Total".into(), tokens: c.total_tokens() });
        }
    }
    rows
}

pub fn write_stats_csv(rows: &[StatsRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "author,title,tokens")?;
    for r in rows {
        writeln!(out, "{},{},{}", csv_field(&r.author), csv_field(&r.title), r.tokens)?;
    }
    Ok(())
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marker_strip() {
        let raw = "header\n*** START OF THE PROJECT GUTENBERG EBOOK X ***\nbody\n*** END OF THE PROJECT GUTENBERG EBOOK X ***\nfooter";
        let s = strip_gutenberg(raw).unwrap();
        assert_eq!(s.text, "body");
        assert!(s.warning.is_none());
    }

    #[test]
    fn no_markers_warns() {
        let s = strip_gutenberg("just text\nmore").unwrap();
        assert_eq!(s.text, "just text\nmore");
        assert!(s.warning.is_some());
    }

    #[test]
    fn reversed_markers_error() {
        let raw = "*** END OF X ***\nbody\n*** START OF X ***";
        assert!(matches!(strip_gutenberg(raw), Err(CorpusError::MalformedSource(_))));
    }

    #[test]
    fn headings_and_illustrations_removed() {
        let raw = "*** START OF X ***\nCHAPTER I\nIt was a dark night.\n[Illustration: a\ndark night]\nChapter 2.\nCHAPTER III. THE STORM\nChapter one began badly.\n*** END OF X ***";
        let s = strip_gutenberg(raw).unwrap();
        assert_eq!(s.text, "It was a dark night.\n\nChapter one began badly.");
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("Hello,\r\n  World\u{2014}caf\u{e9}"), "hello, world caf");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("A  B\tC"), "a b c");
        assert_eq!(normalize("  x  "), "x");
    }

    #[test]
    fn trim() {
        assert_eq!(trim_lines("a\nb\nc\nd", 1, 1), "b\nc");
        assert_eq!(trim_lines("a\nb", 2, 2), "");
    }

    #[test]
    fn budget_examples() {
        assert_eq!(budget_from_lengths(&[("A", vec![10, 20, 30]), ("B", vec![5, 25])]).unwrap(), 5);
        assert_eq!(budget_from_lengths(&[("A", vec![7, 7])]).unwrap(), 7);
        let err = budget_from_lengths(&[("A", vec![7, 7]), ("solo", vec![9])]).unwrap_err();
        assert!(err.to_string().contains("solo"));
    }

    #[test]
    fn plan_examples() {
        let lens = |b| make_sampling_plan(&[20, 10, 99], 2, b, 0).unwrap().per_book.iter().map(|s| s.len).collect::<Vec<_>>();
        assert_eq!(lens(6), vec![4, 2]);
        assert_eq!(lens(7), vec![5, 2]);
        assert_eq!(lens(30), vec![20, 10]);
        let p = make_sampling_plan(&[20, 10, 99], 2, 30, 5).unwrap();
        assert!(p.per_book.iter().all(|s| s.start == 0));
        assert!(make_sampling_plan(&[20, 10, 99], 2, 31, 0).is_err());
    }

    #[test]
    fn single_book_sequence() {
        let book: Vec<TokenId> = (0..9).collect();
        let other: Vec<TokenId> = vec![1; 3];
        let plan = make_sampling_plan(&[9, 3], 1, 9, 4).unwrap();
        let seq = build_training_sequence(&plan, &[&book, &other]);
        assert_eq!(seq.token_ids, book);
    }

    #[test]
    fn stats_table() {
        assert!(corpus_stats(&[]).is_empty());
        let c = AuthorCorpus {
            author_id: "a".into(),
            books: vec![
                Book { author_id: "a".into(), title: "One, Two".into(), normalized_text: String::new(), token_ids: vec![1, 2] },
                Book { author_id: "a".into(), title: "Three".into(), normalized_text: String::new(), token_ids: vec![3] },
            ],
        };
        let rows = corpus_stats(&[c]);
        assert_eq!(rows.last().unwrap().tokens, 3);
        let mut buf = Vec::new();
        write_stats_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "author,title,tokens\na,\"One, Two\",2\na,Three,1\na,Total,3\n");
    }
}

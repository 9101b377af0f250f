//! Content-word, function-word and part-of-speech views of a corpus.

use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FUNC_TOKEN: &str = "<FUNC>";
pub const CONTENT_TOKEN: &str = "<CONTENT>";

/// Penn Treebank word-level tags.
pub const PENN_TAGS: [&str; 36] = [
    "CC", "CD", "DT", "EX", "FW", "IN", "JJ", "JJR", "JJS", "LS", "MD", "NN", "NNS", "NNP", "NNPS", "PDT", "POS", "PRP",
    "PRP$", "RB", "RBR", "RBS", "RP", "SYM", "TO", "UH", "VB", "VBD", "VBG", "VBN", "VBP", "VBZ", "WDT", "WP", "WP$",
    "WRB",
];

const STOPWORDS: &str = include_str!("../data/stopwords.txt");
const LEXICON: &str = include_str!("../data/lexicon.tsv");

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("tag file line {line}: {msg}")]
    MalformedTagFile { line: usize, msg: String },
    #[error("tag file has {tags} words but the text has {words}")]
    TagCountMismatch { tags: usize, words: usize },
    #[error("tag file word {index} is {tagged:?} but the text has {actual:?}")]
    TagWordMismatch { index: usize, tagged: String, actual: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Intact,
    ContentOnly,
    FunctionOnly,
    PosOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [Self::Intact, Self::ContentOnly, Self::FunctionOnly, Self::PosOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Intact => "intact",
            Self::ContentOnly => "content_only",
            Self::FunctionOnly => "function_only",
            Self::PosOnly => "pos_only",
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?}; expected one of intact, content_only, function_only, pos_only"))
    }
}

/// Every special string an experiment registers in the shared vocabulary.
pub fn all_specials() -> Vec<&'static str> {
    let mut v = vec![FUNC_TOKEN, CONTENT_TOKEN];
    v.extend_from_slice(&PENN_TAGS);
    v
}

#[derive(Debug, Clone)]
pub struct StopList {
    words: HashSet<String>,
}

impl StopList {
    pub fn builtin() -> Self {
        Self::parse(STOPWORDS)
    }

    /// One word per line; blank lines ignored.
    pub fn parse(text: &str) -> Self {
        let words = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_ascii_lowercase).collect();
        Self { words }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span<'a> {
    pub text: &'a str,
    pub is_word: bool,
}

fn word_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[a-z0-9']+").unwrap())
}

/// Alternating word / non-word spans that concatenate back to `text`.
pub fn segment_words(text: &str) -> Vec<Span<'_>> {
    let mut spans = Vec::new();
    let mut last = 0;
    for m in word_re().find_iter(text) {
        if m.start() > last {
            spans.push(Span { text: &text[last..m.start()], is_word: false });
        }
        spans.push(Span { text: m.as_str(), is_word: true });
        last = m.end();
    }
    if last < text.len() {
        spans.push(Span { text: &text[last..], is_word: false });
    }
    spans
}

fn mask(text: &str, replace: impl Fn(&str) -> bool, with: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for s in segment_words(text) {
        out.push_str(if s.is_word && replace(s.text) { with } else { s.text });
    }
    out
}

/// Replaces every stop word with `<FUNC>`.
pub fn mask_function_words(text: &str, stop: &StopList) -> String {
    mask(text, |w| stop.contains(w), FUNC_TOKEN)
}

/// Replaces every word not on the stop list with `<CONTENT>`.
pub fn mask_content_words(text: &str, stop: &StopList) -> String {
    mask(text, |w| !stop.contains(w), CONTENT_TOKEN)
}

#[derive(Debug, Clone)]
pub enum Tagger {
    Builtin(BuiltinTagger),
    /// Pre-tagged `(word, tag)` pairs aligned with the text's word spans.
    External(Vec<(String, String)>),
}

#[derive(Debug, Clone)]
pub struct BuiltinTagger {
    lexicon: HashMap<String, &'static str>,
}

impl Default for BuiltinTagger {
    fn default() -> Self {
        let lexicon = LEXICON
            .lines()
            .filter_map(|l| l.split_once('\t'))
            .map(|(w, t)| (w.to_string(), canonical_tag(t).expect("lexicon tags are Penn tags")))
            .collect();
        Self { lexicon }
    }
}

fn canonical_tag(t: &str) -> Option<&'static str> {
    PENN_TAGS.iter().copied().find(|&p| p == t)
}

impl BuiltinTagger {
    pub fn lookup(&self, word: &str) -> Option<&'static str> {
        self.lexicon.get(word).copied()
    }

    /// Lexicon, then suffix rules; `None` means the NN fallback applies.
    fn guess(&self, word: &str) -> Option<&'static str> {
        if let Some(t) = self.lookup(word) {
            return Some(t);
        }
        if word.bytes().all(|b| b.is_ascii_digit()) {
            return Some("CD");
        }
        if word.ends_with("'s") || word == "'" {
            return Some("POS");
        }
        if word.ends_with("n't") {
            return Some("RB");
        }
        let rules: [(&str, &'static str); 14] = [
            ("ly", "RB"),
            ("ing", "VBG"),
            ("ed", "VBD"),
            ("est", "JJS"),
            ("ness", "NN"),
            ("ment", "NN"),
            ("tion", "NN"),
            ("ity", "NN"),
            ("ous", "JJ"),
            ("ful", "JJ"),
            ("able", "JJ"),
            ("ible", "JJ"),
            ("ive", "JJ"),
            ("ish", "JJ"),
        ];
        for (suffix, tag) in rules {
            if word.len() > suffix.len() + 2 && word.ends_with(suffix) {
                return Some(tag);
            }
        }
        if word.len() > 3 && word.ends_with('s') && !word.ends_with("ss") && !word.ends_with("us") {
            return Some("NNS");
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosOutput {
    pub text: String,
    /// Words that received the NN fallback.
    pub fallbacks: usize,
}

/// Replaces each word with its tag; tags are joined by single spaces and
/// everything else is dropped.
pub fn pos_transform(text: &str, tagger: &Tagger) -> Result<PosOutput, AblationError> {
    let words: Vec<&str> = segment_words(text).into_iter().filter(|s| s.is_word).map(|s| s.text).collect();
    let mut tags = Vec::with_capacity(words.len());
    let mut fallbacks = 0;
    match tagger {
        Tagger::Builtin(b) => {
            for w in &words {
                tags.push(b.guess(w).unwrap_or_else(|| {
                    fallbacks += 1;
                    "NN"
                }));
            }
        }
        Tagger::External(pairs) => {
            if pairs.len() != words.len() {
                return Err(AblationError::TagCountMismatch { tags: pairs.len(), words: words.len() });
            }
            for (index, ((tagged, tag), actual)) in pairs.iter().zip(&words).enumerate() {
                if tagged != actual {
                    return Err(AblationError::TagWordMismatch { index, tagged: tagged.clone(), actual: actual.to_string() });
                }
                tags.push(canonical_tag(tag).expect("validated at parse time"));
            }
        }
    }
    if fallbacks > 0 {
        log::debug!("{fallbacks} of {} words fell back to NN", words.len());
    }
    Ok(PosOutput { text: tags.join(" "), fallbacks })
}

/// Parses `word<TAB>tag` lines; tags must be Penn tags.
pub fn parse_tag_file(text: &str) -> Result<Vec<(String, String)>, AblationError> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| AblationError::MalformedTagFile { line: i + 1, msg };
        let (word, tag) = line.split_once('\t').ok_or_else(|| bad("expected word<TAB>tag".into()))?;
        if canonical_tag(tag).is_none() {
            return Err(bad(format!("unknown tag {tag:?}")));
        }
        pairs.push((word.to_string(), tag.to_string()));
    }
    Ok(pairs)
}

/// Produces the text of one corpus view. `tagger` is only consulted for
/// [`AblationMode::PosOnly`].
pub fn apply_mode(text: &str, mode: AblationMode, stop: &StopList, tagger: &Tagger) -> Result<String, AblationError> {
    Ok(match mode {
        AblationMode::Intact => text.to_string(),
        AblationMode::ContentOnly => mask_function_words(text, stop),
        AblationMode::FunctionOnly => mask_content_words(text, stop),
        AblationMode::PosOnly => pos_transform(text, tagger)?.text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stoplist_snapshot() {
        let s = StopList::builtin();
        assert_eq!(s.len(), 318);
        assert!(s.contains("the") && s.contains("yourselves") && !s.contains("dog"));
    }

    #[test]
    fn segments() {
        let spans = segment_words("the dog ran.");
        let words: Vec<_> = spans.iter().filter(|s| s.is_word).map(|s| s.text).collect();
        let other: Vec<_> = spans.iter().filter(|s| !s.is_word).map(|s| s.text).collect();
        assert_eq!(words, ["the", "dog", "ran"]);
        assert_eq!(other, [" ", " ", "."]);
        assert!(segment_words("").is_empty());
    }

    #[test]
    fn masks() {
        let s = StopList::builtin();
        assert_eq!(mask_function_words("the dog ran", &s), "<FUNC> dog ran");
        assert_eq!(mask_content_words("the dog ran", &s), "the <CONTENT> <CONTENT>");
        assert_eq!(mask_function_words("dogs bark", &s), "dogs bark");
        assert_eq!(mask_content_words("and then there were none", &s), "and then there were none");
    }

    #[test]
    fn builtin_tags() {
        let t = Tagger::Builtin(BuiltinTagger::default());
        assert_eq!(pos_transform("the dog ran.", &t).unwrap().text, "DT NN VBD");
        assert_eq!(pos_transform("", &t).unwrap().text, "");
        let out = pos_transform("flibbertigibbet", &t).unwrap();
        assert_eq!(out.fallbacks, 1);
        assert!(PENN_TAGS.contains(&out.text.as_str()));
    }

    #[test]
    fn external_tags() {
        let pairs = parse_tag_file("the\tDT\ndog\tNN\n").unwrap();
        let t = Tagger::External(pairs);
        assert_eq!(pos_transform("the dog", &t).unwrap().text, "DT NN");
        assert!(matches!(pos_transform("the dog ran", &t), Err(AblationError::TagCountMismatch { .. })));
        assert!(matches!(pos_transform("the cat", &t), Err(AblationError::TagWordMismatch { index: 1, .. })));
        assert!(parse_tag_file("the DT").is_err());
        assert!(parse_tag_file("the\tXYZ").is_err());
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
    }
}

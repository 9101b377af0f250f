//! Byte-level BPE compatible with the GPT-2 `vocab.json` / `merges.txt`
//! format, plus a small trainer for desk-scale vocabularies.
//!
//! Token strings use the GPT-2 byte-to-unicode alphabet: every byte maps to a
//! printable code point, so any byte string has an exact encoding.

mod pretokenize;
mod train;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use regex::Regex;
use thiserror::Error;

use crate::model::TokenId;
pub use pretokenize::pretokenize;
pub use train::train_bpe;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("duplicate id {id} for tokens {a:?} and {b:?}")]
    DuplicateId { id: u32, a: String, b: String },
    #[error("token ids are not dense: id {0} is missing")]
    IdGap(u32),
    #[error("merges line {line}: {msg}")]
    MalformedMerge { line: usize, msg: String },
    #[error("vocabulary lacks the byte token for 0x{0:02x}")]
    MissingByte(u8),
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: TokenId, size: usize },
    #[error("decoded bytes are not UTF-8")]
    InvalidUtf8,
    #[error("vocab file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

/// The GPT-2 byte-to-unicode table.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| (33..=126).contains(&b) || (161..=172).contains(&b) || (174..=255).contains(&b);
    let mut extra = 0;
    for b in 0..256u32 {
        table[b as usize] = if printable(b) {
            char::from_u32(b).unwrap()
        } else {
            extra += 1;
            char::from_u32(255 + extra).unwrap()
        };
    }
    table
}

/// Ordering of the 256 base tokens in the published GPT-2 vocabulary:
/// printable bytes first, then the remapped ones.
pub(crate) fn base_byte_order() -> Vec<u8> {
    let table = bytes_to_unicode();
    let mut bytes: Vec<u8> = (0..=255u8).collect();
    bytes.sort_by_key(|&b| table[b as usize] as u32);
    bytes
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
    merges: Vec<(String, String)>,
    /// (left, right) -> (rank, merged id)
    merge_ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
    byte_ids: [TokenId; 256],
    specials: Vec<String>,
    special_re: Option<Regex>,
    /// Raw bytes of each token, for decoding.
    token_bytes: Vec<Vec<u8>>,
}

impl Vocabulary {
    /// Assembles a vocabulary from dense token strings and ordered merges.
    pub fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>, specials: &[&str]) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if let Some(prev) = token_to_id.insert(t.clone(), i as TokenId) {
                return Err(TokenizerError::DuplicateId {
                    id: i as u32,
                    a: tokens[prev as usize].clone(),
                    b: t.clone(),
                });
            }
        }
        let table = bytes_to_unicode();
        let mut byte_ids = [0; 256];
        for b in 0..256 {
            byte_ids[b] = *token_to_id
                .get(&table[b].to_string())
                .ok_or(TokenizerError::MissingByte(b as u8))?;
        }
        let mut reverse = HashMap::with_capacity(256);
        for (b, c) in table.iter().enumerate() {
            reverse.insert(*c, b as u8);
        }
        let token_bytes = tokens
            .iter()
            .map(|t| t.chars().map(|c| reverse.get(&c).copied().unwrap_or(b'?')).collect())
            .collect();
        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.iter().enumerate() {
            let line = rank + 1;
            let lookup = |s: &str| {
                token_to_id.get(s).copied().ok_or_else(|| TokenizerError::MalformedMerge {
                    line,
                    msg: format!("token {s:?} not in vocabulary"),
                })
            };
            let (ia, ib) = (lookup(a)?, lookup(b)?);
            let merged = lookup(&format!("{a}{b}"))?;
            merge_ranks.entry((ia, ib)).or_insert((rank, merged));
        }
        let mut vocab = Self {
            tokens,
            token_to_id,
            merges,
            merge_ranks,
            byte_ids,
            specials: Vec::new(),
            special_re: None,
            token_bytes,
        };
        // Raw special strings may already be vocabulary entries (e.g. <|endoftext|>).
        vocab.add_specials(specials);
        Ok(vocab)
    }

    /// Registers special tokens, appending ids for strings not yet present.
    /// Specials always encode to a single id and are never split by merges.
    pub fn add_specials(&mut self, specials: &[&str]) {
        let table = bytes_to_unicode();
        for &s in specials {
            if s.is_empty() || self.specials.iter().any(|x| x == s) {
                continue;
            }
            let mapped: String = s.bytes().map(|b| table[b as usize]).collect();
            if !self.token_to_id.contains_key(&mapped) {
                let id = self.tokens.len() as TokenId;
                self.tokens.push(mapped.clone());
                self.token_to_id.insert(mapped, id);
                self.token_bytes.push(s.as_bytes().to_vec());
            }
            self.specials.push(s.to_string());
        }
        let mut sorted = self.specials.clone();
        sorted.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        self.special_re = (!sorted.is_empty()).then(|| {
            let pattern = sorted.iter().map(|s| regex::escape(s)).collect::<Vec<_>>().join("|");
            Regex::new(&pattern).expect("escaped alternation")
        });
    }

    /// Reads a GPT-2 style `vocab.json` and `merges.txt`. `<|endoftext|>` is
    /// registered as special when present.
    pub fn load(vocab_path: &Path, merges_path: &Path, specials: &[&str]) -> Result<Self> {
        let vocab_json = fs::read_to_string(vocab_path)?;
        let merges_txt = fs::read_to_string(merges_path)?;
        Self::parse(&vocab_json, &merges_txt, specials)
    }

    pub fn parse(vocab_json: &str, merges_txt: &str, specials: &[&str]) -> Result<Self> {
        let map: HashMap<String, u32> = serde_json::from_str(vocab_json)?;
        let mut slots: Vec<Option<String>> = vec![None; map.len()];
        let mut overflow = Vec::new();
        for (tok, id) in map {
            match slots.get_mut(id as usize) {
                Some(slot @ None) => *slot = Some(tok),
                Some(Some(prev)) => {
                    return Err(TokenizerError::DuplicateId { id, a: prev.clone(), b: tok });
                }
                None => overflow.push(id),
            }
        }
        if let Some(gap) = slots.iter().position(|s| s.is_none()) {
            return Err(TokenizerError::IdGap(gap as u32));
        }
        debug_assert!(overflow.is_empty(), "ids beyond len imply a gap");
        let tokens = slots.into_iter().map(|s| s.unwrap()).collect();
        let merges = parse_merges(merges_txt)?;
        let eot = "<|endoftext|>";
        let mut all: Vec<&str> = Vec::new();
        if vocab_json.contains("\"<|endoftext|>\"") {
            all.push(eot);
        }
        all.extend_from_slice(specials);
        Self::from_parts(tokens, merges, &all)
    }

    /// Byte-level vocabulary with no merges.
    pub fn byte_level(specials: &[&str]) -> Self {
        let table = bytes_to_unicode();
        let tokens = base_byte_order().into_iter().map(|b| table[b as usize].to_string()).collect();
        Self::from_parts(tokens, Vec::new(), specials).expect("byte alphabet is complete")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn special_id(&self, s: &str) -> Option<TokenId> {
        let table = bytes_to_unicode();
        let mapped: String = s.bytes().map(|b| table[b as usize]).collect();
        self.specials.iter().any(|x| x == s).then(|| self.token_to_id[&mapped])
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes<'a>(&self, bytes: &'a [u8]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(bytes.len() / 2);
        let mut cache: HashMap<&[u8], Vec<TokenId>> = HashMap::new();
        let mut plain = |seg: &'a [u8], out: &mut Vec<TokenId>| {
            for (a, b) in pretokenize(seg) {
                let piece = &seg[a..b];
                if let Some(ids) = cache.get(piece) {
                    out.extend_from_slice(ids);
                    continue;
                }
                let ids = self.bpe(piece);
                out.extend_from_slice(&ids);
                cache.insert(piece, ids);
            }
        };
        match (&self.special_re, std::str::from_utf8(bytes)) {
            (Some(re), Ok(text)) => {
                let mut last = 0;
                for m in re.find_iter(text) {
                    plain(&bytes[last..m.start()], &mut out);
                    out.push(self.special_id(m.as_str()).expect("matched a registered special"));
                    last = m.end();
                }
                plain(&bytes[last..], &mut out);
            }
            _ => plain(bytes, &mut out),
        }
        out
    }

    /// Merges within one pre-token, lowest rank first.
    fn bpe(&self, piece: &[u8]) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = piece.iter().map(|&b| self.byte_ids[b as usize]).collect();
        if self.merge_ranks.is_empty() {
            return ids;
        }
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0], w[1])).map(|&(r, m)| (r, w[0], w[1], m)))
                .min_by_key(|&(r, ..)| r);
            let Some((_, a, b, merged)) = best else { break };
            let mut next = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(ids[i]);
                    i += 1;
                }
            }
            ids = next;
        }
        ids
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len() * 3);
        for &id in ids {
            let bytes = self
                .token_bytes
                .get(id as usize)
                .ok_or(TokenizerError::IdOutOfRange { id, size: self.len() })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        String::from_utf8(self.decode_bytes(ids)?).map_err(|_| TokenizerError::InvalidUtf8)
    }

    /// `vocab.json` content: ids in ascending order, non-ASCII escaped.
    pub fn vocab_json(&self) -> String {
        let mut s = String::with_capacity(self.tokens.len() * 12);
        s.push('{');
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                s.push_str(", ");
            }
            push_json_string(&mut s, t);
            let _ = write!(s, ": {i}");
        }
        s.push('}');
        s
    }

    pub fn merges_txt(&self) -> String {
        let mut s = String::from("#version: 0.2\n");
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn save(&self, vocab_path: &Path, merges_path: &Path) -> Result<()> {
        fs::write(vocab_path, self.vocab_json())?;
        fs::write(merges_path, self.merges_txt())?;
        Ok(())
    }
}

fn push_json_string(s: &mut String, t: &str) {
    s.push('"');
    for c in t.chars() {
        match c {
            '"' => s.push_str("\\\""),
            '\\' => s.push_str("\\\\"),
            ' '..='~' => s.push(c),
            _ => {
                let mut buf = [0u16; 2];
                for unit in c.encode_utf16(&mut buf) {
                    let _ = write!(s, "\\u{unit:04x}");
                }
            }
        }
    }
    s.push('"');
}

fn parse_merges(text: &str) -> Result<Vec<(String, String)>> {
    let mut merges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.starts_with("#version") {
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => merges.push((a.to_string(), b.to_string())),
            _ => {
                return Err(TokenizerError::MalformedMerge {
                    line: i + 1,
                    msg: format!("expected two space-separated tokens, got {line:?}"),
                })
            }
        }
    }
    Ok(merges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_table_is_bijective() {
        let t = bytes_to_unicode();
        let mut seen: Vec<char> = t.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 256);
        assert_eq!(t[b' ' as usize], '\u{120}');
        assert_eq!(t[b'!' as usize], '!');
    }

    #[test]
    fn base_order_matches_published_ids() {
        let order = base_byte_order();
        assert_eq!(order[0], b'!');
        // 'Ġ' (space) sits at id 220 in the published vocabulary.
        assert_eq!(order.iter().position(|&b| b == b' '), Some(220));
    }

    #[test]
    fn empty_roundtrip() {
        let v = Vocabulary::byte_level(&[]);
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert_eq!(v.len(), 256);
    }

    #[test]
    fn specials_are_single_ids() {
        let v = Vocabulary::byte_level(&["<FUNC>", "<CONTENT>"]);
        assert_eq!(v.len(), 258);
        let ids = v.encode("<FUNC> dog");
        assert_eq!(ids[0], v.special_id("<FUNC>").unwrap());
        assert_eq!(v.decode(&ids).unwrap(), "<FUNC> dog");
    }

    #[test]
    fn longest_special_wins() {
        let v = Vocabulary::byte_level(&["NN", "NNS", "NNPS", "NNP"]);
        let ids = v.encode("NNPS NN NNS");
        let want: Vec<TokenId> = vec![
            v.special_id("NNPS").unwrap(),
            v.byte_ids[b' ' as usize],
            v.special_id("NN").unwrap(),
            v.byte_ids[b' ' as usize],
            v.special_id("NNS").unwrap(),
        ];
        assert_eq!(ids, want);
    }

    #[test]
    fn parse_rejects_gap_and_duplicates() {
        let bytes = Vocabulary::byte_level(&[]);
        let mut json = bytes.vocab_json();
        json.pop();
        let gap = format!("{json}, \"zz\": 257}}");
        assert!(matches!(Vocabulary::parse(&gap, "", &[]), Err(TokenizerError::IdGap(256))));
        assert!(matches!(
            Vocabulary::parse(r#"{"a": 0, "b": 2}"#, "", &[]),
            Err(TokenizerError::IdGap(1))
        ));
        let dup = format!("{json}, \"zz\": 3}}");
        assert!(Vocabulary::parse(&dup, "", &[]).is_err());
    }

    #[test]
    fn parse_rejects_malformed_merge() {
        let v = Vocabulary::byte_level(&[]);
        let err = Vocabulary::parse(&v.vocab_json(), "#version: 0.2\na b c\n", &[]).unwrap_err();
        assert!(matches!(err, TokenizerError::MalformedMerge { line: 2, .. }));
    }

    #[test]
    fn save_load_roundtrip() {
        let text = "the cat sat on the mat with the other cat";
        let mut v = train_bpe(text, 270);
        v.add_specials(&["<FUNC>"]);
        let dir = tempfile::tempdir().unwrap();
        let (vp, mp) = (dir.path().join("vocab.json"), dir.path().join("merges.txt"));
        v.save(&vp, &mp).unwrap();
        let back = Vocabulary::load(&vp, &mp, &["<FUNC>"]).unwrap();
        assert_eq!(back.len(), v.len());
        assert_eq!(back.encode(text), v.encode(text));
        assert_eq!(back.encode("<FUNC>"), v.encode("<FUNC>"));
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let v = Vocabulary::byte_level(&[]);
        assert!(matches!(v.decode(&[256]), Err(TokenizerError::IdOutOfRange { id: 256, .. })));
    }

    #[test]
    fn eot_registered_from_vocab() {
        let mut v = Vocabulary::byte_level(&[]);
        v.add_specials(&["<|endoftext|>"]);
        let back = Vocabulary::parse(&v.vocab_json(), "", &[]).unwrap();
        assert_eq!(back.encode("a<|endoftext|>").len(), 2);
    }
}

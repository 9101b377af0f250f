//! GPT-2 pre-tokenization, hand-coded over bytes.
//!
//! Mirrors the pattern
//! `'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+`
//! with leftmost-first alternation. Invalid UTF-8 bytes count as "other".

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Number,
    Space,
    Whitespace,
    Other,
}

impl Class {
    fn is_ws(self) -> bool {
        matches!(self, Class::Space | Class::Whitespace)
    }
}

struct Unit {
    start: usize,
    end: usize,
    class: Class,
}

fn units(bytes: &[u8]) -> Vec<Unit> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut pos = 0;
    for chunk in bytes.utf8_chunks() {
        for c in chunk.valid().chars() {
            let len = c.len_utf8();
            let class = if c == ' ' {
                Class::Space
            } else if c.is_whitespace() {
                Class::Whitespace
            } else if c.is_alphabetic() {
                Class::Letter
            } else if c.is_numeric() {
                Class::Number
            } else {
                Class::Other
            };
            out.push(Unit { start: pos, end: pos + len, class });
            pos += len;
        }
        for _ in chunk.invalid() {
            out.push(Unit { start: pos, end: pos + 1, class: Class::Other });
            pos += 1;
        }
    }
    out
}

const CONTRACTIONS: [&[u8]; 7] = [b"'s", b"'t", b"'re", b"'ve", b"'m", b"'ll", b"'d"];

/// Splits `bytes` into pre-token byte ranges that cover the input exactly.
pub fn pretokenize(bytes: &[u8]) -> Vec<(usize, usize)> {
    let u = units(bytes);
    let mut spans = Vec::new();
    let mut i = 0;
    while i < u.len() {
        let start = u[i].start;
        if bytes[start] == b'\'' {
            if let Some(c) = CONTRACTIONS.iter().find(|c| bytes[start..].starts_with(c)) {
                let end = start + c.len();
                spans.push((start, end));
                while i < u.len() && u[i].start < end {
                    i += 1;
                }
                continue;
            }
        }
        // ` ?X+` for letters, numbers, and other symbols.
        let lead = usize::from(u[i].class == Class::Space && i + 1 < u.len() && !u[i + 1].class.is_ws());
        let body = i + lead;
        if body < u.len() && !u[body].class.is_ws() {
            let class = u[body].class;
            let mut j = body;
            while j < u.len() && u[j].class == class {
                j += 1;
            }
            spans.push((start, u[j - 1].end));
            i = j;
            continue;
        }
        // Whitespace run; leave the last char to prefix a following token.
        let mut j = i;
        while j < u.len() && u[j].class.is_ws() {
            j += 1;
        }
        let end = if j < u.len() && j - i >= 2 { j - 1 } else { j };
        spans.push((start, u[end - 1].end));
        i = end;
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(s: &str) -> Vec<&str> {
        pretokenize(s.as_bytes()).into_iter().map(|(a, b)| &s[a..b]).collect()
    }

    #[test]
    fn gpt2_reference_splits() {
        assert_eq!(split("Hello world"), vec!["Hello", " world"]);
        assert_eq!(split("I'm here, ok?"), vec!["I", "'m", " here", ",", " ok", "?"]);
        assert_eq!(split("a   b"), vec!["a", "  ", " b"]);
        assert_eq!(split("x\n\ny"), vec!["x", "\n", "\n", "y"]);
        assert_eq!(split("end  "), vec!["end", "  "]);
        assert_eq!(split("abc123 456"), vec!["abc", "123", " 456"]);
        assert_eq!(split("<FUNC> dog"), vec!["<", "FUNC", ">", " dog"]);
        assert_eq!(split("'hello'"), vec!["'", "hello", "'"]);
        assert_eq!(split(""), Vec::<&str>::new());
    }

    #[test]
    fn covers_invalid_utf8() {
        let bytes = [b'a', 0xff, 0xfe, b' ', b'b'];
        let spans = pretokenize(&bytes);
        assert_eq!(spans.first().unwrap().0, 0);
        assert_eq!(spans.last().unwrap().1, bytes.len());
        assert!(spans.windows(2).all(|w| w[0].1 == w[1].0));
    }
}

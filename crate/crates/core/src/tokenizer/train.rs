use std::collections::HashMap;

use super::{base_byte_order, bytes_to_unicode, pretokenize, Vocabulary};
use crate::model::TokenId;

/// Greedy BPE training: repeatedly merges the most frequent adjacent pair
/// (ties to the smallest `(left, right)` ids) until the vocabulary holds
/// `target_v` tokens or no pair occurs at least twice.
pub fn train_bpe(text: &str, target_v: usize) -> Vocabulary {
    let table = bytes_to_unicode();
    let order = base_byte_order();
    let mut tokens: Vec<String> = order.iter().map(|&b| table[b as usize].to_string()).collect();
    let mut byte_id = [0 as TokenId; 256];
    for (id, &b) in order.iter().enumerate() {
        byte_id[b as usize] = id as TokenId;
    }
    let mut index: HashMap<String, TokenId> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();

    let bytes = text.as_bytes();
    let mut counts: HashMap<&[u8], usize> = HashMap::new();
    for (a, b) in pretokenize(bytes) {
        *counts.entry(&bytes[a..b]).or_default() += 1;
    }
    let mut words: Vec<(Vec<TokenId>, usize)> = counts
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| byte_id[b as usize]).collect(), c))
        .collect();
    words.sort();

    let mut merges = Vec::new();
    while tokens.len() < target_v {
        let mut pairs: HashMap<(TokenId, TokenId), usize> = HashMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *pairs.entry((p[0], p[1])).or_default() += c;
            }
        }
        let Some((&(a, b), &count)) = pairs.iter().max_by(|x, y| x.1.cmp(y.1).then(y.0.cmp(x.0))) else {
            break;
        };
        if count < 2 {
            break;
        }
        let merged = format!("{}{}", tokens[a as usize], tokens[b as usize]);
        let id = *index.entry(merged.clone()).or_insert_with(|| {
            tokens.push(merged);
            (tokens.len() - 1) as TokenId
        });
        merges.push((tokens[a as usize].clone(), tokens[b as usize].clone()));
        for (w, _) in &mut words {
            if w.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
                    out.push(id);
                    i += 2;
                } else {
                    out.push(w[i]);
                    i += 1;
                }
            }
            *w = out;
        }
    }
    Vocabulary::from_parts(tokens, merges, &[]).expect("trained merges are consistent")
}

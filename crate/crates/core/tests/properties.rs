use predcomp::ablation::{mask_content_words, mask_function_words, segment_words, StopList, CONTENT_TOKEN, FUNC_TOKEN};
use predcomp::corpus::{largest_remainder, normalize};
use predcomp::distance::{normalize_loss, stylometric_distance};
use predcomp::stats::{bootstrap_ci, welch_t};
use predcomp::tokenizer::{train_bpe, Vocabulary};
use proptest::prelude::*;
use std::sync::OnceLock;

fn sample() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, 2..30)
}

fn trained_vocab() -> &'static Vocabulary {
    static V: OnceLock<Vocabulary> = OnceLock::new();
    V.get_or_init(|| {
        let text: String = common_text();
        let mut v = train_bpe(&text, 320);
        v.add_specials(&["<|endoftext|>"]);
        v
    })
}

fn common_text() -> String {
    "the quick brown fox jumps over the lazy dog; it was the best of times, it was the worst of times.\n".repeat(20)
}

proptest! {
    #[test]
    fn welch_is_antisymmetric(a in sample(), b in sample()) {
        prop_assume!(a.windows(2).any(|w| w[0] != w[1]) || b.windows(2).any(|w| w[0] != w[1]));
        let ab = welch_t(&a, &b).unwrap();
        let ba = welch_t(&b, &a).unwrap();
        prop_assert!((ab.t + ba.t).abs() <= 1e-9 * ab.t.abs().max(1.0));
        prop_assert!((ab.p - ba.p).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.p));
    }

    #[test]
    fn welch_is_shift_invariant(a in sample(), b in sample(), c in -50.0f64..50.0) {
        prop_assume!(a.windows(2).any(|w| w[0] != w[1]) || b.windows(2).any(|w| w[0] != w[1]));
        let r = welch_t(&a, &b).unwrap();
        let sa: Vec<f64> = a.iter().map(|x| x + c).collect();
        let sb: Vec<f64> = b.iter().map(|x| x + c).collect();
        let s = welch_t(&sa, &sb).unwrap();
        prop_assert!((r.t - s.t).abs() <= 1e-6 * r.t.abs().max(1.0));
    }

    #[test]
    fn bootstrap_interval_stays_within_sample_range(v in sample(), seed in any::<u64>()) {
        let (lo, hi) = bootstrap_ci(&v, 0.95, 200, seed).unwrap();
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Summation can land an ulp or so past the extremes.
        let eps = 1e-12 * min.abs().max(max.abs()).max(1.0);
        prop_assert!(min - eps <= lo && lo <= hi && hi <= max + eps);
        prop_assert_eq!(bootstrap_ci(&v, 0.95, 200, seed).unwrap(), (lo, hi));
    }

    #[test]
    fn distance_is_symmetric_with_zero_diagonal(
        n in 2usize..7,
        vals in prop::collection::vec(0.5f64..10.0, 49),
    ) {
        let l: Vec<Vec<f64>> = (0..n).map(|i| vals[i * 7..i * 7 + n].to_vec()).collect();
        let d = stylometric_distance(&normalize_loss(&l).unwrap()).unwrap();
        for i in 0..n {
            prop_assert_eq!(d[i][i], 0.0);
            for j in 0..n {
                prop_assert_eq!(d[i][j], d[j][i]);
            }
        }
    }

    #[test]
    fn largest_remainder_sums_and_is_fair(
        weights in prop::collection::vec(0usize..10_000, 1..10),
        total in 0usize..100_000,
    ) {
        let sum: usize = weights.iter().sum();
        prop_assume!(sum > 0);
        let shares = largest_remainder(&weights, total);
        prop_assert_eq!(shares.iter().sum::<usize>(), total);
        for (s, w) in shares.iter().zip(&weights) {
            let dev = (*s as i128 * sum as i128 - total as i128 * *w as i128).abs();
            prop_assert!(dev < sum as i128);
        }
    }

    #[test]
    fn bytes_roundtrip_through_bpe(bytes in prop::collection::vec(any::<u8>(), 0..300)) {
        let v = trained_vocab();
        prop_assert_eq!(v.decode_bytes(&v.encode_bytes(&bytes)).unwrap(), bytes);
    }

    #[test]
    fn text_roundtrip_through_bpe(s in "\\PC{0,200}") {
        let v = trained_vocab();
        prop_assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
    }

    #[test]
    fn normalize_is_idempotent(s in "\\PC{0,300}") {
        let once = normalize(&s);
        prop_assert_eq!(normalize(&once), once);
    }

    #[test]
    fn segmentation_concatenates_back(s in "[a-zA-Z0-9' ,.\\n-]{0,200}") {
        let joined: String = segment_words(&s).iter().map(|sp| sp.text).collect();
        prop_assert_eq!(joined, s);
    }

    #[test]
    fn masks_partition_words(words in prop::collection::vec("(the|of|and|a|to|in|cat|river|stone|walked|7|it's)", 0..60)) {
        let text = words.join(" ");
        let stop = StopList::builtin();
        let func = mask_function_words(&text, &stop).matches(FUNC_TOKEN).count();
        let content = mask_content_words(&text, &stop).matches(CONTENT_TOKEN).count();
        prop_assert_eq!(func + content, words.len());
    }
}

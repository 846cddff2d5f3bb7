use std::collections::BTreeMap;

use deskmoe_tokenizer::{compression_ratio, merge_subtokenizers, pre_tokenize, train_bpe, SubwordVocab, TokenizerError};
use proptest::prelude::*;

fn merge_strs(v: &SubwordVocab) -> Vec<(String, String)> {
    v.merges()
        .iter()
        .map(|(l, r)| (String::from_utf8_lossy(l).into_owned(), String::from_utf8_lossy(r).into_owned()))
        .collect()
}

#[test]
fn single_pair_corpus() {
    let v = train_bpe(&["aaaa"], 257, 16).unwrap();
    assert_eq!(merge_strs(&v)[0], ("a".into(), "a".into()));
    assert_eq!(v.len(), 257);
}

#[test]
fn abab_learns_ab_then_abab() {
    let v = train_bpe(&["abab abab"], 259, 16).unwrap();
    let m = merge_strs(&v);
    assert_eq!(m[0], ("a".into(), "b".into()));
    assert_eq!(m[1], ("ab".into(), "ab".into()));
    assert_eq!(v.encode("abab"), vec![v.id_of(b"abab").unwrap()]);
}

#[test]
fn piece_cap_blocks_long_merges() {
    let v = train_bpe(&["abab abab"], 259, 2).unwrap();
    assert!(v.id_of(b"abab").is_none());
    assert!(v.pieces().iter().all(|p| p.len() <= 2));
}

#[test]
fn small_target_is_config_error() {
    assert!(matches!(train_bpe(&["abc"], 255, 16), Err(TokenizerError::Config(_))));
    assert!(matches!(train_bpe::<&str>(&[], 300, 16), Err(TokenizerError::Config(_))));
}

#[test]
fn pre_tokenizer_keeps_leading_whitespace() {
    assert_eq!(pre_tokenize(b"  ab cd\n"), vec![&b"  ab"[..], b" cd", b"\n"]);
    assert!(pre_tokenize(b"").is_empty());
}

#[test]
fn encode_empty_and_unseen_bytes() {
    let v = train_bpe(&["hello world hello"], 280, 16).unwrap();
    assert!(v.encode("").is_empty());
    let text = "สวัสดี \u{0} zz\u{7f}";
    let ids = v.encode(text);
    assert_eq!(v.decode(&ids).unwrap(), text.as_bytes());
}

#[test]
fn union_of_overlapping_vocabs() {
    let base = SubwordVocab::bytes_only(16);
    let with = |extra: &[&str]| {
        let mut pieces = base.pieces().to_vec();
        let mut merges = Vec::new();
        for e in extra {
            let b = e.as_bytes();
            pieces.push(b.to_vec());
            merges.push((b[..1].to_vec(), b[1..].to_vec()));
        }
        SubwordVocab::from_parts(pieces, merges, 16).unwrap()
    };
    // {a,b,c} ∪ {b,c,d}
    let a = with(&["xa", "xb", "xc"]);
    let b = with(&["xb", "xc", "xd"]);
    let m = merge_subtokenizers(&[a.clone(), b]).unwrap();
    assert_eq!(m.len() - 256, 4);
    assert_eq!(m.merges().len(), 4);
    assert_eq!(merge_subtokenizers(&[a.clone(), a.clone()]).unwrap(), a);
}

#[test]
fn three_way_merge_counts_scale_down() {
    // sizes 15 + 2 + 5 with 4 shared pieces -> 18, mirroring 150k+20k+50k -> 180k
    let base = SubwordVocab::bytes_only(16);
    let make = |names: Vec<String>| {
        let mut pieces = base.pieces().to_vec();
        let mut merges = Vec::new();
        for n in names {
            let b = n.into_bytes();
            merges.push((b[..1].to_vec(), b[1..].to_vec()));
            pieces.push(b);
        }
        SubwordVocab::from_parts(pieces, merges, 16).unwrap()
    };
    let p = |i: usize| format!("q{}", (b'a' + i as u8) as char);
    let v1 = make((0..15).map(p).collect());
    let v2 = make((13..15).map(p).collect());
    let v3 = make((15..18).map(p).chain([p(0), p(1)]).collect());
    let m = merge_subtokenizers(&[v1, v2, v3]).unwrap();
    assert_eq!(m.len() - 256, 18);
}

#[test]
fn vocab_file_round_trip() {
    let v = train_bpe(&["the cat sat on the mat", "สวัสดี ครับ"], 300, 16).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    v.save(&path).unwrap();
    let back = SubwordVocab::load(&path).unwrap();
    assert_eq!(back, v);
    assert_eq!(back.to_text(), v.to_text());
    assert!(SubwordVocab::from_text("nonsense").is_err());
}

#[test]
fn compression_ratios() {
    let bytes = SubwordVocab::bytes_only(16);
    let mut texts = BTreeMap::new();
    texts.insert("en".to_string(), vec!["plain ascii text".to_string()]);
    texts.insert("empty".to_string(), vec![]);
    let table = compression_ratio(&texts, &bytes);
    let en = table.iter().find(|r| r.language == "en").unwrap();
    assert_eq!(en.ratio, Some(1.0));
    assert_eq!(table.iter().find(|r| r.language == "empty").unwrap().ratio, None);

    let whole = "abcdefgh";
    let mut pieces = bytes.pieces().to_vec();
    let mut merges = Vec::new();
    for n in 2..=whole.len() {
        pieces.push(whole.as_bytes()[..n].to_vec());
        merges.push((whole.as_bytes()[..n - 1].to_vec(), vec![whole.as_bytes()[n - 1]]));
    }
    let v = SubwordVocab::from_parts(pieces, merges, 16).unwrap();
    let mut t = BTreeMap::new();
    t.insert("x".to_string(), vec![whole.to_string()]);
    assert_eq!(compression_ratio(&t, &v)[0].ratio, Some(1.0 / whole.len() as f64));
}

fn corpus() -> Vec<String> {
    let words = ["token", "tokens", "merge", "merging", "vocab", "byte", "pair", "encoding", "the", "a", "of"];
    (0..60)
        .map(|i| (0..12).map(|j| words[(i * 7 + j * 3) % words.len()]).collect::<Vec<_>>().join(" "))
        .collect()
}

#[test]
fn trained_vocab_beats_bytes_on_training_corpus() {
    let c = corpus();
    let v = train_bpe(&c, 320, 16).unwrap();
    let mut t = BTreeMap::new();
    t.insert("en".to_string(), c.clone());
    let trained = compression_ratio(&t, &v)[0].ratio.unwrap();
    let base = compression_ratio(&t, &SubwordVocab::bytes_only(16))[0].ratio.unwrap();
    assert!(trained < base);
}

#[test]
fn more_merges_never_more_tokens() {
    let c = corpus();
    let count = |v: &SubwordVocab| c.iter().map(|d| v.encode(d).len()).sum::<usize>();
    let mut last = usize::MAX;
    for target in [256, 260, 270, 290, 330] {
        let v = train_bpe(&c, target, 16).unwrap();
        let n = count(&v);
        assert!(n <= last, "{target}: {n} > {last}");
        last = n;
    }
}

#[test]
fn training_is_deterministic() {
    let c = corpus();
    assert_eq!(train_bpe(&c, 300, 16).unwrap(), train_bpe(&c, 300, 16).unwrap());
}

#[test]
fn merged_vocab_no_worse_on_disjoint_scripts() {
    let en: Vec<String> = corpus();
    let th: Vec<String> = (0..40).map(|i| ["สวัสดี", "ครับ", "ภาษา", "ไทย"][i % 4].repeat(1 + i % 3)).collect();
    let ve: Vec<String> = (0..40).map(|i| ["xin", "chào", "tiếng", "việt"][i % 4].repeat(1 + i % 2)).collect();
    let vs = [train_bpe(&en, 300, 16).unwrap(), train_bpe(&th, 300, 16).unwrap(), train_bpe(&ve, 300, 16).unwrap()];
    let merged = merge_subtokenizers(&vs).unwrap();
    for (v, docs) in vs.iter().zip([&en, &th, &ve]) {
        let mut t = BTreeMap::new();
        t.insert("l".to_string(), docs.clone());
        let own = compression_ratio(&t, v)[0].ratio.unwrap();
        let m = compression_ratio(&t, &merged)[0].ratio.unwrap();
        assert!(m <= own + 1e-12, "{m} > {own}");
    }
}

proptest! {
    #[test]
    fn round_trip_any_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let v = train_bpe(&["lorem ipsum dolor sit amet lorem ipsum"], 290, 16).unwrap();
        let ids = v.encode_bytes(&bytes);
        prop_assert_eq!(v.decode(&ids).unwrap(), bytes);
    }

    #[test]
    fn pieces_respect_cap(cap in 1usize..6, text in "[ab ]{1,40}") {
        let v = train_bpe(&[text.as_str()], 300, cap).unwrap();
        prop_assert!(v.pieces().iter().all(|p| p.len() <= cap));
        prop_assert_eq!(v.decode(&v.encode(&text)).unwrap(), text.as_bytes());
    }
}

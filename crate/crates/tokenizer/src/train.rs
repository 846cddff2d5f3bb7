use std::collections::HashMap;

use crate::{pre_tokenize, Result, SubwordVocab, TokenizerError};

/// Learns merges over `corpus` until the vocabulary reaches
/// `target_vocab_size` pieces or no pair can be merged within
/// `max_piece_len` bytes.
///
/// Each round merges the most frequent adjacent pair; ties go to the pair
/// whose (left bytes, right bytes) sorts first.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_vocab_size: usize, max_piece_len: usize) -> Result<SubwordVocab> {
    if target_vocab_size < 256 {
        return Err(TokenizerError::Config(format!(
            "target vocabulary {target_vocab_size} is below the 256 byte pieces"
        )));
    }
    if max_piece_len == 0 {
        return Err(TokenizerError::Config("max piece length must be positive".into()));
    }
    if corpus.iter().all(|d| d.as_ref().is_empty()) {
        return Err(TokenizerError::Config("empty training corpus".into()));
    }

    let mut chunk_counts: HashMap<&[u8], u64> = HashMap::new();
    for doc in corpus {
        for chunk in pre_tokenize(doc.as_ref().as_bytes()) {
            *chunk_counts.entry(chunk).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<u32>, u64)> = chunk_counts
        .into_iter()
        .map(|(c, n)| (c.iter().map(|&b| b as u32).collect(), n))
        .collect();
    words.sort();

    let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut index: HashMap<Vec<u8>, u32> = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();
    let mut merges: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();

    while pieces.len() < target_vocab_size {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                if pieces[w[0] as usize].len() + pieces[w[1] as usize].len() <= max_piece_len {
                    *counts.entry((w[0], w[1])).or_default() += n;
                }
            }
        }
        let best = counts.into_iter().max_by(|&(pa, ca), &(pb, cb)| {
            ca.cmp(&cb).then_with(|| {
                let ka = (&pieces[pa.0 as usize], &pieces[pa.1 as usize]);
                let kb = (&pieces[pb.0 as usize], &pieces[pb.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((a, b), _)) = best else { break };
        let joined = [pieces[a as usize].as_slice(), pieces[b as usize].as_slice()].concat();
        let id = *index.entry(joined.clone()).or_insert_with(|| {
            pieces.push(joined);
            (pieces.len() - 1) as u32
        });
        merges.push((pieces[a as usize].clone(), pieces[b as usize].clone()));
        for (syms, _) in &mut words {
            let mut i = 0;
            let mut out = Vec::with_capacity(syms.len());
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(id);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
        }
    }
    SubwordVocab::from_parts(pieces, merges, max_piece_len)
}

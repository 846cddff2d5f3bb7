use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::{pre_tokenize, Result, TokenizerError};

pub const VOCAB_HEADER: &str = "deskmoe-bpe-vocab v1";

/// Ordered pieces (ids are positions) and ordered merge rules.
#[derive(Debug, Clone)]
pub struct SubwordVocab {
    pieces: Vec<Vec<u8>>,
    merges: Vec<(Vec<u8>, Vec<u8>)>,
    max_piece_len: usize,
    index: HashMap<Vec<u8>, u32>,
    /// `(left id, right id) -> (rank, merged id)`.
    table: HashMap<(u32, u32), (usize, u32)>,
}

impl PartialEq for SubwordVocab {
    fn eq(&self, other: &Self) -> bool {
        self.pieces == other.pieces && self.merges == other.merges && self.max_piece_len == other.max_piece_len
    }
}

impl SubwordVocab {
    /// The 256 single-byte pieces and no merges.
    pub fn bytes_only(max_piece_len: usize) -> Self {
        Self::from_parts((0..=255u8).map(|b| vec![b]).collect(), Vec::new(), max_piece_len)
            .expect("byte pieces are always valid")
    }

    /// Validates and indexes a vocabulary. The first 256 pieces must be the
    /// single bytes in order.
    pub fn from_parts(pieces: Vec<Vec<u8>>, merges: Vec<(Vec<u8>, Vec<u8>)>, max_piece_len: usize) -> Result<Self> {
        let bad = |m: String| Err(TokenizerError::Format(m));
        if max_piece_len == 0 {
            return bad("max piece length must be positive".into());
        }
        if pieces.len() < 256 || (0..256).any(|b| pieces[b] != [b as u8]) {
            return bad("vocabulary must start with the 256 byte pieces".into());
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() || p.len() > max_piece_len {
                return bad(format!("piece {i} has length {} (cap {max_piece_len})", p.len()));
            }
            if index.insert(p.clone(), i as u32).is_some() {
                return bad(format!("duplicate piece {}", hex::encode(p)));
            }
        }
        let mut table = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let joined = [l.as_slice(), r.as_slice()].concat();
            let (Some(&a), Some(&b), Some(&c)) = (index.get(l), index.get(r), index.get(&joined)) else {
                return bad(format!("merge {rank} references a missing piece"));
            };
            table.entry((a, b)).or_insert((rank, c));
        }
        Ok(Self {
            pieces,
            merges,
            max_piece_len,
            index,
            table,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[Vec<u8>] {
        &self.pieces
    }

    pub fn merges(&self) -> &[(Vec<u8>, Vec<u8>)] {
        &self.merges
    }

    pub fn max_piece_len(&self) -> usize {
        self.max_piece_len
    }

    pub fn id_of(&self, piece: &[u8]) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    /// Encodes one chunk by repeatedly applying the lowest-ranked merge
    /// present, all of its occurrences at once, left to right.
    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .filter_map(|w| self.table.get(&(w[0], w[1])).map(|&(rank, id)| (rank, w[0], w[1], id)))
                .min_by_key(|&(rank, ..)| rank);
            let Some((_, a, b, id)) = best else { break };
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    next.push(id);
                    i += 2;
                } else {
                    next.push(syms[i]);
                    i += 1;
                }
            }
            syms = next;
        }
        out.extend(syms);
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(bytes.len());
        for chunk in pre_tokenize(bytes) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.piece(id).ok_or(TokenizerError::UnknownId(id))?);
        }
        Ok(out)
    }

    /// Header line, a counts line, one hex piece per line, then one merge
    /// per line as two hex pieces.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{VOCAB_HEADER}").unwrap();
        writeln!(
            s,
            "pieces {} merges {} max_piece_len {}",
            self.pieces.len(),
            self.merges.len(),
            self.max_piece_len
        )
        .unwrap();
        for p in &self.pieces {
            writeln!(s, "{}", hex::encode(p)).unwrap();
        }
        for (l, r) in &self.merges {
            writeln!(s, "{} {}", hex::encode(l), hex::encode(r)).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let fmt = |m: &str| TokenizerError::Format(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(fmt("unknown header"));
        }
        let counts: Vec<&str> = lines.next().ok_or_else(|| fmt("missing counts"))?.split(' ').collect();
        let num = |i: usize| -> Result<usize> {
            counts
                .get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| fmt("bad counts line"))
        };
        if counts.len() != 6 || counts[0] != "pieces" || counts[2] != "merges" || counts[4] != "max_piece_len" {
            return Err(fmt("bad counts line"));
        }
        let (n_pieces, n_merges, max_len) = (num(1)?, num(3)?, num(5)?);
        let unhex = |h: &str| hex::decode(h).map_err(|e| TokenizerError::Format(e.to_string()));
        let mut pieces = Vec::with_capacity(n_pieces);
        for _ in 0..n_pieces {
            pieces.push(unhex(lines.next().ok_or_else(|| fmt("truncated pieces"))?)?);
        }
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let line = lines.next().ok_or_else(|| fmt("truncated merges"))?;
            let (l, r) = line.split_once(' ').ok_or_else(|| fmt("bad merge line"))?;
            merges.push((unhex(l)?, unhex(r)?));
        }
        if lines.any(|l| !l.is_empty()) {
            return Err(fmt("trailing content"));
        }
        Self::from_parts(pieces, merges, max_len)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

use crate::canonicalize;

/// Maps text to a fixed-length real vector.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Signed feature hashing of character n-grams over the canonicalized text,
/// L2-normalized. Pure and deterministic for a given seed.
#[derive(Debug, Clone)]
pub struct HashedNgramEmbedder {
    pub dim: usize,
    /// N-gram lengths `1..=max_n`.
    pub max_n: usize,
    pub seed: u64,
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        Self {
            dim: 64,
            max_n: 3,
            seed: 0,
        }
    }
}

// FNV-1a, seeded through the offset basis.
fn hash(seed: u64, chars: &[char]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for c in chars {
        for b in (*c as u32).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl Embedder for HashedNgramEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let chars: Vec<char> = std::iter::once('\u{2}')
            .chain(canonicalize(text).chars())
            .chain(std::iter::once('\u{3}'))
            .collect();
        for n in 1..=self.max_n {
            for gram in chars.windows(n) {
                let h = hash(self.seed, gram);
                let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                v[(h % self.dim as u64) as usize] += sign;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

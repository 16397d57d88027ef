use serde::{Deserialize, Serialize};

use crate::rng::fnv1a;

/// Character-trigram hashing featurizer. Total on arbitrary strings, so
/// gibberish and names go through the same path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrigramFeaturizer {
    pub buckets: usize,
}

impl TrigramFeaturizer {
    pub fn new(buckets: usize) -> Self {
        Self { buckets }
    }

    /// Bucket counts of the lowercased, boundary-padded string, l2-normalized.
    pub fn features(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.buckets];
        let chars: Vec<char> = std::iter::once('^')
            .chain(text.chars().flat_map(char::to_lowercase))
            .chain(std::iter::once('$'))
            .collect();
        let mut buf = String::with_capacity(12);
        for w in chars.windows(3) {
            buf.clear();
            buf.extend(w);
            out[(fnv1a(buf.as_bytes()) % self.buckets as u64) as usize] += 1.0;
        }
        if chars.len() < 3 {
            buf.clear();
            buf.extend(&chars);
            out[(fnv1a(buf.as_bytes()) % self.buckets as u64) as usize] += 1.0;
        }
        crate::linalg::normalize_in_place(&mut out);
        out
    }
}

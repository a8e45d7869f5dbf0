//! Token feature vectors: NER, POS and document-frequency one-hots followed by
//! the word embedding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::token_repr::{EmbeddingTable, Token};

pub const N_FREQ_BINS: usize = 5;

/// Named-entity tags every tag vocabulary must contain.
pub const REQUIRED_NER: [&str; 4] = ["Organization", "Person", "Location", "O"];

/// Ordered NER and POS tag sets. Each gets one extra trailing slot for tags
/// outside the set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagVocab {
    ner: Vec<String>,
    pos: Vec<String>,
}

impl TagVocab {
    pub fn new(ner: Vec<String>, pos: Vec<String>) -> Result<Self> {
        for tag in REQUIRED_NER {
            if !ner.iter().any(|t| t == tag) {
                return Err(Error::contract(format!("NER tag set lacks {tag:?}")));
            }
        }
        for (kind, tags) in [("NER", &ner), ("POS", &pos)] {
            let mut seen = std::collections::HashSet::new();
            if let Some(dup) = tags.iter().find(|t| !seen.insert(t.as_str())) {
                return Err(Error::contract(format!("duplicate {kind} tag {dup:?}")));
            }
        }
        Ok(TagVocab { ner, pos })
    }

    pub fn ner_tags(&self) -> &[String] {
        &self.ner
    }

    pub fn pos_tags(&self) -> &[String] {
        &self.pos
    }

    /// Slot for an NER tag; unknown tags map to the trailing OTHER slot.
    pub fn ner_index(&self, tag: &str) -> usize {
        self.ner.iter().position(|t| t == tag).unwrap_or(self.ner.len())
    }

    pub fn pos_index(&self, tag: &str) -> usize {
        self.pos.iter().position(|t| t == tag).unwrap_or(self.pos.len())
    }

    pub fn ner_slots(&self) -> usize {
        self.ner.len() + 1
    }

    pub fn pos_slots(&self) -> usize {
        self.pos.len() + 1
    }

    /// Length of the one-hot prefix of a feature vector.
    pub fn categorical_len(&self) -> usize {
        self.ner_slots() + self.pos_slots() + N_FREQ_BINS
    }

    /// `d_v` for word embeddings of width `embed_dim`.
    pub fn feature_len(&self, embed_dim: usize) -> usize {
        self.categorical_len() + embed_dim
    }

    /// Names of the categorical feature columns in vector order.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.categorical_len());
        names.extend(self.ner.iter().map(|t| format!("NER={t}")));
        names.push("NER=<other>".into());
        names.extend(self.pos.iter().map(|t| format!("POS={t}")));
        names.push("POS=<other>".into());
        names.extend((0..N_FREQ_BINS).map(|b| format!("DOCLEN-{b}")));
        names
    }

    /// Column of the frequency-bin one-hot for `bin`.
    pub fn freq_column(&self, bin: usize) -> usize {
        self.ner_slots() + self.pos_slots() + bin
    }

    /// One-hot prefix `[NER | POS | freq bin]` for a token.
    pub fn categorical(&self, token: &Token) -> Vec<f64> {
        let mut v = vec![0.0; self.categorical_len()];
        v[token.ner.min(self.ner.len())] = 1.0;
        v[self.ner_slots() + token.pos.min(self.pos.len())] = 1.0;
        v[self.freq_column(token.freq_bin.min(N_FREQ_BINS - 1))] = 1.0;
        v
    }
}

/// Maps document-frequency counts to one of five bins (0 = rarest).
///
/// Edges sit at the 20/40/60/80th percentiles of `ln(1 + count)` over the
/// fitted vocabulary; a count falls in bin `k` when it exceeds exactly `k`
/// edges. Repeated percentile values collapse into a single edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBinner {
    edges: Vec<f64>,
}

impl FrequencyBinner {
    pub fn fit<'a, I>(doc_frequencies: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a String, &'a u64)>,
    {
        let mut logs: Vec<f64> = doc_frequencies
            .into_iter()
            .map(|(_, &c)| (c as f64).ln_1p())
            .collect();
        if logs.is_empty() {
            return Err(Error::EmptySequence("fit_binner"));
        }
        logs.sort_by(f64::total_cmp);
        let n = logs.len();
        let mut edges: Vec<f64> = Vec::with_capacity(N_FREQ_BINS - 1);
        for k in 1..N_FREQ_BINS {
            let idx = (k * n).div_ceil(N_FREQ_BINS) - 1;
            let e = logs[idx];
            if edges.last().is_none_or(|&last| e > last) {
                edges.push(e);
            }
        }
        // an edge at the maximum separates nothing
        if edges.last() == logs.last() {
            edges.pop();
        }
        Ok(FrequencyBinner { edges })
    }

    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.len() >= N_FREQ_BINS || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract(format!("invalid bin edges {edges:?}")));
        }
        Ok(FrequencyBinner { edges })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn bin(&self, count: u64) -> usize {
        let x = (count as f64).ln_1p();
        self.edges.iter().filter(|&&e| x > e).count()
    }
}

/// Fits a binner on a `word -> count` map.
pub fn fit_binner(doc_frequencies: &HashMap<String, u64>) -> Result<FrequencyBinner> {
    let mut entries: Vec<_> = doc_frequencies.iter().collect();
    entries.sort();
    FrequencyBinner::fit(entries)
}

/// `v = [NER one-hot | POS one-hot | freq-bin one-hot | E w]`.
///
/// Only the embedding suffix carries gradient.
pub fn build_feature_vector<'t>(
    tape: &'t Tape<'t>,
    token: &Token,
    embeddings: &EmbeddingTable,
    vocab: &TagVocab,
) -> Result<Var<'t>> {
    let ew = embeddings.lookup_one(tape, token.word_id)?;
    feature_vector_with(tape, token, ew, vocab)
}

/// Same as [`build_feature_vector`] with an already looked-up `E w`.
pub fn feature_vector_with<'t>(
    tape: &'t Tape<'t>,
    token: &Token,
    ew: Var<'t>,
    vocab: &TagVocab,
) -> Result<Var<'t>> {
    let prefix = tape.constant(Tensor::vector(vocab.categorical(token))?);
    Var::concat(&[prefix, ew])
}

//! What the word/character gate learned.
//!
//! Feature weights average each categorical column of `W_g` over its rows.
//! Token gates average `mean(g)` over every occurrence of a word in a corpus;
//! values near 1 mean the token leans on its character representation.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::harness::data::Vocab;
use crate::reader::{Example, Model};
use crate::tape::Tape;
use crate::token_repr::{GateParams, Token};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeatureWeight {
    pub feature: String,
    pub mean_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenGate {
    pub token: String,
    pub mean_gate: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateReport {
    pub features: Vec<FeatureWeight>,
    /// Sorted by descending mean gate, then by token.
    pub tokens: Vec<TokenGate>,
}

impl GateReport {
    pub fn feature(&self, name: &str) -> Option<f64> {
        self.features.iter().find(|f| f.feature == name).map(|f| f.mean_weight)
    }

    pub fn top(&self, n: usize) -> &[TokenGate] {
        &self.tokens[..n.min(self.tokens.len())]
    }

    pub fn bottom(&self, n: usize) -> &[TokenGate] {
        &self.tokens[self.tokens.len().saturating_sub(n)..]
    }

    /// Writes `feature,mean_weight` rows to `features_path` and
    /// `token,mean_gate,count` rows to `tokens_path`.
    pub fn write_csv(&self, features_path: &Path, tokens_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(features_path)?;
        for f in &self.features {
            w.serialize(f)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(tokens_path)?;
        for t in &self.tokens {
            w.serialize(t)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fine_gate(model: &Model) -> Result<&crate::token_repr::WordCharGateParams> {
    match &model.encoder.gate {
        Some(GateParams::FineGrained(p)) => Ok(p),
        _ => Err(Error::contract(format!(
            "gate report needs a fine-grained gate model, not {}",
            model.config.combiner
        ))),
    }
}

/// Mean over the rows of `W_g` of each categorical feature column.
pub fn feature_weights(model: &Model) -> Result<Vec<FeatureWeight>> {
    let p = fine_gate(model)?;
    let w = model.params.get(p.w_g);
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    Ok(model
        .encoder
        .tags
        .feature_names()
        .into_iter()
        .enumerate()
        .map(|(j, feature)| FeatureWeight {
            feature,
            mean_weight: (0..rows).map(|i| w.data()[i * cols + j]).sum::<f64>() / rows as f64,
        })
        .collect())
}

/// Mean gate value of one token.
pub fn token_gate_mean(model: &Model, token: &Token) -> Result<f64> {
    let tape = Tape::new(&model.params);
    let g = model
        .encoder
        .gate_values(&tape, token)?
        .ok_or_else(|| Error::contract("model has no fine-grained gate"))?;
    Ok(g.value().sum() / g.len() as f64)
}

/// Per-word mean gate over every document and query token of `examples`.
pub fn token_gates(model: &Model, examples: &[Example], words: &Vocab, exec: Execution) -> Result<Vec<TokenGate>> {
    fine_gate(model)?;
    let mut occurrences: HashMap<&Token, usize> = HashMap::new();
    for ex in examples {
        for t in ex.document.iter().chain(&ex.query) {
            *occurrences.entry(t).or_default() += 1;
        }
    }
    let mut unique: Vec<(&Token, usize)> = occurrences.into_iter().collect();
    unique.sort_by(|a, b| {
        (a.0.word_id, a.0.ner, a.0.pos, a.0.freq_bin, &a.0.char_ids).cmp(&(b.0.word_id, b.0.ner, b.0.pos, b.0.freq_bin, &b.0.char_ids))
    });
    let gates = exec
        .map(&unique, |(t, _)| token_gate_mean(model, t))
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    let mut per_word: HashMap<usize, (f64, usize)> = HashMap::new();
    for ((t, n), g) in unique.iter().zip(gates) {
        let e = per_word.entry(t.word_id).or_default();
        e.0 += g * *n as f64;
        e.1 += n;
    }
    let mut out: Vec<TokenGate> = per_word
        .into_iter()
        .map(|(w, (sum, count))| TokenGate {
            token: words.items().get(w).cloned().unwrap_or_else(|| format!("#{w}")),
            mean_gate: sum / count as f64,
            count,
        })
        .collect();
    out.sort_by(|a, b| b.mean_gate.total_cmp(&a.mean_gate).then_with(|| a.token.cmp(&b.token)));
    Ok(out)
}

pub fn gate_report(model: &Model, examples: &[Example], words: &Vocab, exec: Execution) -> Result<GateReport> {
    Ok(GateReport {
        features: feature_weights(model)?,
        tokens: token_gates(model, examples, words, exec)?,
    })
}

//! Evaluation metrics and the parallel evaluation loops.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::reader::{Answer, Example, Model, Prediction};

/// Token-level F1 between two token sequences (multiset overlap).
pub fn token_f1<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for g in gold {
        *counts.entry(g.as_ref()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for p in pred {
        if let Some(c) = counts.get_mut(p.as_ref()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// 1.0 when the two token strings are identical.
pub fn exact_match<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    let eq = pred.len() == gold.len() && pred.iter().zip(gold).all(|(a, b)| a.as_ref() == b.as_ref());
    if eq {
        1.0
    } else {
        0.0
    }
}

/// 1-based rank of `gold` in `ranking`.
pub fn rank_of(ranking: &[usize], gold: usize) -> Result<usize> {
    ranking
        .iter()
        .position(|&t| t == gold)
        .map(|p| p + 1)
        .ok_or_else(|| Error::contract(format!("tag {gold} missing from ranking")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TagMetrics {
    pub precision_at_1: f64,
    pub recall_at_k: f64,
    pub mean_rank: f64,
}

/// P@1, R@k and mean rank from the 1-based gold ranks.
pub fn tag_metrics(ranks: &[usize], k: usize) -> TagMetrics {
    let n = ranks.len().max(1) as f64;
    TagMetrics {
        precision_at_1: ranks.iter().filter(|&&r| r == 1).count() as f64 / n,
        recall_at_k: ranks.iter().filter(|&&r| r <= k).count() as f64 / n,
        mean_rank: ranks.iter().sum::<usize>() as f64 / n,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpanMetrics {
    pub exact_match: f64,
    pub f1: f64,
}

/// Metrics of one evaluation run, named for reporting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricSet {
    pub examples: usize,
    pub values: Vec<(String, f64)>,
}

impl MetricSet {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// Metric used for model selection (higher is better).
    pub fn primary(&self) -> f64 {
        self.values[0].1
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "value"])?;
        w.write_record(["examples".to_string(), self.examples.to_string()])?;
        for (name, value) in &self.values {
            w.write_record([name.clone(), format!("{value}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let width = self.values.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(8);
        let mut s = format!("{:<width$}  {}\n", "examples", self.examples);
        for (name, value) in &self.values {
            s.push_str(&format!("{name:<width$}  {value:.4}\n"));
        }
        s
    }
}

fn predictions(model: &Model, data: &[Example], exec: Execution) -> Result<Vec<Prediction>> {
    exec.map(data, |ex| model.predict(ex)).into_iter().collect()
}

/// Fraction of examples whose predicted candidate is the gold word.
pub fn evaluate_cloze(model: &Model, data: &[Example], exec: Execution) -> Result<f64> {
    let preds = predictions(model, data, exec)?;
    let correct = preds
        .iter()
        .zip(data)
        .filter(|(p, ex)| matches!((p, &ex.answer), (Prediction::Word(w), Answer::Word(g)) if w == g))
        .count();
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Exact match and token F1 of predicted spans, compared as word-id strings.
pub fn evaluate_span(model: &Model, data: &[Example], exec: Execution) -> Result<SpanMetrics> {
    let preds = predictions(model, data, exec)?;
    let (mut em, mut f1) = (0.0, 0.0);
    for (p, ex) in preds.iter().zip(data) {
        let (Prediction::Span(ps, pe), Answer::Span(gs, ge)) = (p, &ex.answer) else {
            return Err(Error::contract("evaluate_span needs span examples"));
        };
        let words = |s: usize, e: usize| -> Vec<String> {
            ex.document[s..=e].iter().map(|t| t.word_id.to_string()).collect()
        };
        let (pw, gw) = (words(*ps, *pe), words(*gs, *ge));
        em += exact_match(&pw, &gw);
        f1 += token_f1(&pw, &gw);
    }
    let n = data.len().max(1) as f64;
    Ok(SpanMetrics {
        exact_match: em / n,
        f1: f1 / n,
    })
}

pub fn evaluate_tags(model: &Model, data: &[Example], k: usize, exec: Execution) -> Result<TagMetrics> {
    let preds = predictions(model, data, exec)?;
    let ranks = preds
        .iter()
        .zip(data)
        .map(|(p, ex)| match (p, &ex.answer) {
            (Prediction::Ranking(r), Answer::Tag(g)) => rank_of(r, *g),
            _ => Err(Error::contract("evaluate_tags needs tag examples")),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tag_metrics(&ranks, k))
}

/// Task-appropriate metrics; the first value is the selection metric.
pub fn evaluate(model: &Model, data: &[Example], exec: Execution) -> Result<MetricSet> {
    use crate::reader::HeadKind;
    let values = match model.config.head {
        HeadKind::Cloze => vec![("accuracy".to_string(), evaluate_cloze(model, data, exec)?)],
        HeadKind::Span => {
            let m = evaluate_span(model, data, exec)?;
            vec![("f1".to_string(), m.f1), ("exact_match".to_string(), m.exact_match)]
        }
        HeadKind::TagPredict => {
            let m = evaluate_tags(model, data, 10, exec)?;
            vec![
                ("precision_at_1".to_string(), m.precision_at_1),
                ("recall_at_10".to_string(), m.recall_at_k),
                ("mean_rank".to_string(), m.mean_rank),
            ]
        }
    };
    Ok(MetricSet {
        examples: data.len(),
        values,
    })
}

/// Share of the most frequent gold tag: P@1 of always predicting it.
pub fn majority_precision_at_1(data: &[Example]) -> f64 {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for ex in data {
        if let Answer::Tag(t) = ex.answer {
            *counts.entry(t).or_default() += 1;
        }
    }
    counts.values().copied().max().unwrap_or(0) as f64 / data.len().max(1) as f64
}

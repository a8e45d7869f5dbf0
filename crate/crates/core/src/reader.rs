//! The K-layer reader: token encoding, per-layer document/query RNNs with a
//! document-query interaction, and an answer head.
//!
//! At layer `k` separate bidirectional GRUs run over `H_p^{k-1}` and over the
//! query token representations `H_q`, giving `P^k` and `Q^k`; the interaction
//! produces `H_p^k = r(P^k, Q^k)`. The head reads `H_p^K`.
//!
//! The tag-prediction head has no query and no interaction: token
//! representations feed a single LSTM whose last state is classified.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::doc_query::{fg_attend, ga_attend, DocQueryGateParams, Interaction, LayerState};
use crate::error::{Error, Result};
use crate::features::TagVocab;
use crate::params::{ParamId, ParamSet};
use crate::recurrent::{run_sequence, Direction, GruParams, LstmParams, Mode, Rnn};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::token_repr::{
    CharEncoder, CombinerKind, EmbeddingTable, EncodeCache, GateParams, ScalarGateParams, Token, TokenEncoder,
    WordCharGateParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Cloze,
    Span,
    TagPredict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub combiner: CombinerKind,
    pub interaction: Interaction,
    /// Number of reader layers `K`.
    pub layers: usize,
    /// RNN hidden size per direction.
    pub hidden_dim: usize,
    /// Word embedding and character representation width `d_e`.
    pub embed_dim: usize,
    /// Character embedding width.
    pub char_dim: usize,
    pub char_direction: Direction,
    pub vocab_size: usize,
    pub alphabet_size: usize,
    pub tags: TagVocab,
    /// Output classes of the tag-prediction head.
    pub num_labels: usize,
    pub dropout: f64,
    pub train_word_embeddings: bool,
    pub embed_init: f64,
    pub lstm_forget_bias: f64,
    pub max_span_len: usize,
    /// Seed of the parameter initialisation.
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults for everything but the head and the vocabulary sizes.
    pub fn new(head: HeadKind, vocab_size: usize, alphabet_size: usize, tags: TagVocab) -> Self {
        ModelConfig {
            head,
            combiner: CombinerKind::FineGrainedGate,
            interaction: Interaction::FineGrained,
            layers: 2,
            hidden_dim: 32,
            embed_dim: 16,
            char_dim: 16,
            char_direction: Direction::Forward,
            vocab_size,
            alphabet_size,
            tags,
            num_labels: 1,
            dropout: 0.0,
            train_word_embeddings: true,
            embed_init: 0.1,
            lstm_forget_bias: 0.0,
            max_span_len: 15,
            seed: 0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.tags.feature_len(self.embed_dim)
    }

    pub fn token_dim(&self) -> usize {
        self.combiner.output_dim(self.embed_dim, self.feature_dim())
    }

    /// Width of document states between layers.
    pub fn state_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("char_dim", self.char_dim),
            ("vocab_size", self.vocab_size),
            ("alphabet_size", self.alphabet_size),
            ("num_labels", self.num_labels),
            ("max_span_len", self.max_span_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.embed_dim % self.char_direction.num_directions() != 0 {
            return Err(Error::contract("embed_dim must split across char encoder directions"));
        }
        Ok(())
    }
}

/// Gold answer of an example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    /// Word id of the cloze answer.
    Word(usize),
    /// Inclusive document positions.
    Span(usize, usize),
    Tag(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub document: Vec<Token>,
    /// Empty for tag prediction.
    pub query: Vec<Token>,
    pub answer: Answer,
    /// Candidate word ids (cloze only).
    pub candidates: Vec<usize>,
}

impl Example {
    pub fn doc_word_ids(&self) -> Vec<usize> {
        self.document.iter().map(|t| t.word_id).collect()
    }

    /// Checks the answer against the document and `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.document.is_empty() {
            return Err(Error::EmptySequence("document"));
        }
        let m = self.document.len();
        match (&self.answer, config.head) {
            (Answer::Word(w), HeadKind::Cloze) => {
                if !self.document.iter().any(|t| t.word_id == *w) {
                    return Err(Error::MissingCandidate(format!("answer word id {w}")));
                }
                if let Some(c) = self.candidates.iter().find(|&&c| !self.document.iter().any(|t| t.word_id == c)) {
                    return Err(Error::MissingCandidate(format!("candidate word id {c}")));
                }
            }
            (Answer::Span(s, e), HeadKind::Span) => {
                if s > e || *e >= m {
                    return Err(Error::contract(format!("span ({s}, {e}) invalid for document of {m}")));
                }
            }
            (Answer::Tag(t), HeadKind::TagPredict) => {
                if *t >= config.num_labels {
                    return Err(Error::contract(format!("tag {t} out of range {}", config.num_labels)));
                }
            }
            (a, h) => return Err(Error::contract(format!("answer {a:?} does not fit head {h:?}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReaderLayer {
    pub doc_rnn: Rnn<GruParams>,
    pub query_rnn: Rnn<GruParams>,
    pub gate: Option<DocQueryGateParams>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Head {
    Cloze { score: ParamId },
    Span { start: ParamId, end: ParamId },
    TagPredict { lstm: Rnn<LstmParams>, w_out: ParamId, b_out: ParamId },
}

/// Unnormalised scores from a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Output<'t> {
    Cloze { logits: Var<'t> },
    Span { start: Var<'t>, end: Var<'t> },
    Tags { logits: Var<'t> },
}

/// Probabilities read off an [`Output`].
#[derive(Clone, Debug, PartialEq)]
pub enum Distribution {
    Positions(Vec<f64>),
    Span { start: Vec<f64>, end: Vec<f64> },
    Tags(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prediction {
    Word(usize),
    Span(usize, usize),
    /// Tag ids by descending probability.
    Ranking(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoder: TokenEncoder,
    pub layers: Vec<ReaderLayer>,
    pub head: Head,
}

impl Model {
    /// Builds and initialises every parameter from `config.seed`; the same
    /// config always yields the same parameter names, order and values.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let (d_e, d_v) = (config.embed_dim, config.feature_dim());

        let words = EmbeddingTable::new(
            &mut params,
            "word_embed",
            config.vocab_size,
            d_e,
            config.embed_init,
            config.train_word_embeddings,
            &mut rng,
        )?;
        let chars = if config.combiner.needs_chars() {
            Some(CharEncoder::new(
                &mut params,
                "char",
                config.alphabet_size,
                config.char_dim,
                d_e,
                config.char_direction,
                &mut rng,
            )?)
        } else {
            None
        };
        let gate_scale = 1.0 / (d_v as f64).sqrt();
        let gate = match config.combiner {
            CombinerKind::FineGrainedGate => Some(GateParams::FineGrained(WordCharGateParams::new(
                &mut params,
                "gate",
                d_e,
                d_v,
                gate_scale,
                &mut rng,
            )?)),
            CombinerKind::ScalarGate => Some(GateParams::Scalar(ScalarGateParams::new(
                &mut params,
                "gate",
                d_v,
                gate_scale,
                &mut rng,
            )?)),
            _ => None,
        };
        let encoder = TokenEncoder {
            kind: config.combiner,
            words,
            chars,
            gate,
            tags: config.tags.clone(),
        };
        let token_dim = encoder.output_dim();
        let (d, sd) = (config.hidden_dim, config.state_dim());

        let mut layers = Vec::new();
        let head = if config.head == HeadKind::TagPredict {
            let lstm = Rnn::lstm(
                &mut params,
                "tag.lstm",
                token_dim,
                d,
                Direction::Forward,
                config.lstm_forget_bias,
                &mut rng,
            )?;
            let w_out = params.add_uniform("tag.w_out", &[config.num_labels, d], 1.0 / (d as f64).sqrt(), &mut rng);
            let b_out = params.add("tag.b_out", Tensor::zeros(&[config.num_labels])?);
            Head::TagPredict { lstm, w_out, b_out }
        } else {
            for k in 0..config.layers {
                let name = format!("layer{k}");
                let doc_in = if k == 0 { token_dim } else { sd };
                let doc_rnn = Rnn::gru(&mut params, &format!("{name}.doc"), doc_in, d, Direction::Bidirectional, &mut rng)?;
                let query_rnn =
                    Rnn::gru(&mut params, &format!("{name}.query"), token_dim, d, Direction::Bidirectional, &mut rng)?;
                let gate = match config.interaction {
                    Interaction::FineGrained => Some(DocQueryGateParams::new(
                        &mut params,
                        &format!("{name}.fg"),
                        sd,
                        1.0 / (sd as f64).sqrt(),
                        &mut rng,
                    )?),
                    Interaction::GatedAttention => None,
                };
                layers.push(ReaderLayer { doc_rnn, query_rnn, gate });
            }
            let scale = 1.0 / (sd as f64).sqrt();
            match config.head {
                HeadKind::Cloze => Head::Cloze {
                    score: params.add_uniform("head.score", &[sd], scale, &mut rng),
                },
                _ => Head::Span {
                    start: params.add_uniform("head.start", &[sd], scale, &mut rng),
                    end: params.add_uniform("head.end", &[sd], scale, &mut rng),
                },
            }
        };
        Ok(Model {
            config,
            params,
            encoder,
            layers,
            head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    fn dropout<'t>(&self, tape: &'t Tape<'t>, x: Var<'t>, rng: Option<&mut ChaCha8Rng>) -> Result<Var<'t>> {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                    .collect();
                x.mul(tape.constant(Tensor::new(x.shape(), mask)?))
            }
            _ => Ok(x),
        }
    }

    /// Forward pass on `tape`, which must be built over `self.params`. Dropout
    /// is applied only when `dropout_rng` is given.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<'t>,
        document: &[Token],
        query: &[Token],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Output<'t>> {
        if document.is_empty() {
            return Err(Error::EmptySequence("document"));
        }
        let mut cache = EncodeCache::new();
        let doc_reps = self.encoder.encode_sequence(tape, document, &mut cache)?;

        if let Head::TagPredict { lstm, w_out, b_out } = &self.head {
            if !query.is_empty() {
                return Err(Error::contract("tag prediction takes no query"));
            }
            let x = self.dropout(tape, doc_reps, dropout_rng.as_deref_mut())?;
            let last = run_sequence(tape, lstm, x, Mode::LastState)?;
            let logits = tape.param(*w_out).matmul(last)?.add(tape.param(*b_out))?;
            return Ok(Output::Tags { logits });
        }

        if query.is_empty() {
            return Err(Error::EmptySequence("query"));
        }
        let query_reps = self.encoder.encode_sequence(tape, query, &mut cache)?;
        let doc_ids: Vec<usize> = document.iter().map(|t| t.word_id).collect();
        let query_ids: Vec<usize> = query.iter().map(|t| t.word_id).collect();
        let mut hp = doc_reps;
        for layer in &self.layers {
            let x = self.dropout(tape, hp, dropout_rng.as_deref_mut())?;
            let p = run_sequence(tape, &layer.doc_rnn, x, Mode::AllStates)?;
            let xq = self.dropout(tape, query_reps, dropout_rng.as_deref_mut())?;
            let q = run_sequence(tape, &layer.query_rnn, xq, Mode::AllStates)?;
            let state = LayerState::new(p, q, &doc_ids, &query_ids)?;
            hp = match &layer.gate {
                Some(g) => fg_attend(tape, &state, g)?,
                None => ga_attend(&state)?,
            };
        }
        match &self.head {
            Head::Cloze { score } => Ok(Output::Cloze {
                logits: hp.matmul(tape.param(*score))?,
            }),
            Head::Span { start, end } => Ok(Output::Span {
                start: hp.matmul(tape.param(*start))?,
                end: hp.matmul(tape.param(*end))?,
            }),
            Head::TagPredict { .. } => unreachable!(),
        }
    }

    /// Negative log-likelihood of `answer`. For cloze answers the probability
    /// mass of every document position holding the answer word counts.
    pub fn loss<'t>(&self, output: &Output<'t>, document: &[Token], answer: &Answer) -> Result<Var<'t>> {
        match (output, answer) {
            (Output::Cloze { logits }, Answer::Word(w)) => {
                let positions: Vec<usize> = (0..document.len()).filter(|&i| document[i].word_id == *w).collect();
                if positions.is_empty() {
                    return Err(Error::MissingCandidate(format!("answer word id {w}")));
                }
                logits.nll(&positions)
            }
            (Output::Span { start, end }, Answer::Span(s, e)) => start.nll(&[*s])?.add(end.nll(&[*e])?),
            (Output::Tags { logits }, Answer::Tag(t)) => logits.nll(&[*t]),
            (o, a) => Err(Error::contract(format!("answer {a:?} does not fit output {o:?}"))),
        }
    }

    /// Loss of one example on a fresh tape; returns the loss and parameter
    /// gradients.
    pub fn example_gradients(
        &self,
        example: &Example,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, crate::params::ParamGrads)> {
        let tape = Tape::new(&self.params);
        let out = self.forward(&tape, &example.document, &example.query, dropout_rng)?;
        let loss = self.loss(&out, &example.document, &example.answer)?;
        let value = loss.item();
        let grads = tape.backward(loss)?;
        Ok((value, grads.into_params()))
    }

    pub fn distribution(&self, document: &[Token], query: &[Token]) -> Result<Distribution> {
        let tape = Tape::new(&self.params);
        let probs = |v: Var<'_>| -> Result<Vec<f64>> { Ok(v.softmax()?.value().into_data()) };
        Ok(match self.forward(&tape, document, query, None)? {
            Output::Cloze { logits } => Distribution::Positions(probs(logits)?),
            Output::Span { start, end } => Distribution::Span {
                start: probs(start)?,
                end: probs(end)?,
            },
            Output::Tags { logits } => Distribution::Tags(probs(logits)?),
        })
    }

    pub fn predict(&self, example: &Example) -> Result<Prediction> {
        match self.distribution(&example.document, &example.query)? {
            Distribution::Positions(p) => {
                predict_cloze(&p, &example.doc_word_ids(), &example.candidates).map(Prediction::Word)
            }
            Distribution::Span { start, end } => {
                let (s, e) = predict_span(&start, &end, self.config.max_span_len)?;
                Ok(Prediction::Span(s, e))
            }
            Distribution::Tags(p) => Ok(Prediction::Ranking(rank_tags(&p))),
        }
    }
}

/// Candidate with the largest summed probability over its document positions;
/// ties go to the lowest word id.
pub fn predict_cloze(prob: &[f64], doc_word_ids: &[usize], candidates: &[usize]) -> Result<usize> {
    if prob.len() != doc_word_ids.len() {
        return Err(Error::dim("predict_cloze", &[prob.len()], &[doc_word_ids.len()]));
    }
    if candidates.is_empty() {
        return Err(Error::contract("predict_cloze needs at least one candidate"));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<(usize, f64)> = None;
    for c in sorted {
        let mut mass = 0.0;
        let mut seen = false;
        for (p, &w) in prob.iter().zip(doc_word_ids) {
            if w == c {
                mass += p;
                seen = true;
            }
        }
        if !seen {
            return Err(Error::MissingCandidate(format!("candidate word id {c}")));
        }
        if best.is_none_or(|(_, m)| mass > m) {
            best = Some((c, mass));
        }
    }
    Ok(best.expect("nonempty candidates").0)
}

/// `argmax start[s]·end[e]` over `s ≤ e ≤ s + max_len − 1`; ties go to the
/// smallest `s`, then the smallest `e`.
pub fn predict_span(start: &[f64], end: &[f64], max_len: usize) -> Result<(usize, usize)> {
    if start.len() != end.len() {
        return Err(Error::dim("predict_span", &[start.len()], &[end.len()]));
    }
    if start.is_empty() {
        return Err(Error::EmptySequence("predict_span"));
    }
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let m = start.len();
    let mut best = (0, 0, f64::NEG_INFINITY);
    for s in 0..m {
        for e in s..m.min(s + max_len) {
            let score = start[s] * end[e];
            if score > best.2 {
                best = (s, e, score);
            }
        }
    }
    Ok((best.0, best.1))
}

/// Tag ids ordered by descending probability, ties by ascending id.
pub fn rank_tags(prob: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..prob.len()).collect();
    ids.sort_by(|&a, &b| prob[b].total_cmp(&prob[a]).then(a.cmp(&b)));
    ids
}

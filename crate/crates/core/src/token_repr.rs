//! Token representations `h = f(w, C)` built from a word embedding `E w` and a
//! character-level encoding `c`.
//!
//! The fine-grained combiner computes a per-dimension gate from the token's
//! feature vector `v` and blends the two views coordinate-wise:
//!
//! ```text
//! g = σ(W_g v + b_g)
//! h = g ⊙ c + (1 − g) ⊙ (E w)
//! ```
//!
//! High gate values route the character view through, low values the word
//! view. The remaining [`CombinerKind`]s are the usual baselines.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{feature_vector_with, TagVocab};
use crate::params::{ParamId, ParamSet};
use crate::recurrent::{run_sequence, Direction, GruParams, Mode, Rnn};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Word id 0 is reserved for out-of-vocabulary words.
pub const UNK_WORD: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Token {
    pub word_id: usize,
    pub char_ids: Vec<usize>,
    /// NER slot in the [`TagVocab`].
    pub ner: usize,
    /// POS slot in the [`TagVocab`].
    pub pos: usize,
    pub freq_bin: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        rows: usize,
        dim: usize,
        scale: f64,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Shape(vec![rows, dim]));
        }
        let table = params.add_uniform(name, &[rows, dim], scale, rng);
        params.set_trainable(table, trainable);
        Ok(EmbeddingTable { table, rows, dim })
    }

    /// `[ids.len(), dim]` matrix of rows.
    pub fn lookup<'t>(&self, tape: &'t Tape<'t>, ids: &[usize]) -> Result<Var<'t>> {
        tape.gather(self.table, ids)
    }

    /// Single row as a vector.
    pub fn lookup_one<'t>(&self, tape: &'t Tape<'t>, id: usize) -> Result<Var<'t>> {
        self.lookup(tape, &[id])?.row(0)
    }
}

/// `W_g` (`d_e × d_v`) and `b_g` (`d_e`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordCharGateParams {
    pub w_g: ParamId,
    pub b_g: ParamId,
    pub embed_dim: usize,
    pub feature_dim: usize,
}

impl WordCharGateParams {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        embed_dim: usize,
        feature_dim: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w_g = params.add_uniform(format!("{name}.w_g"), &[embed_dim, feature_dim], scale, rng);
        let b_g = params.add(format!("{name}.b_g"), Tensor::zeros(&[embed_dim])?);
        Ok(WordCharGateParams {
            w_g,
            b_g,
            embed_dim,
            feature_dim,
        })
    }
}

/// Scalar gate conditioned on the same feature vector: `s = σ(w_s · v + b_s)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScalarGateParams {
    /// `1 × d_v`
    pub w_s: ParamId,
    /// `[1]`
    pub b_s: ParamId,
    pub feature_dim: usize,
}

impl ScalarGateParams {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        feature_dim: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w_s = params.add_uniform(format!("{name}.w_s"), &[1, feature_dim], scale, rng);
        let b_s = params.add(format!("{name}.b_s"), Tensor::zeros(&[1])?);
        Ok(ScalarGateParams { w_s, b_s, feature_dim })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GateParams {
    FineGrained(WordCharGateParams),
    Scalar(ScalarGateParams),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerKind {
    WordOnly,
    CharOnly,
    Concat,
    FeatConcat,
    ScalarGate,
    FineGrainedGate,
}

impl CombinerKind {
    pub const ALL: [CombinerKind; 6] = [
        CombinerKind::WordOnly,
        CombinerKind::CharOnly,
        CombinerKind::Concat,
        CombinerKind::FeatConcat,
        CombinerKind::ScalarGate,
        CombinerKind::FineGrainedGate,
    ];

    pub fn needs_features(self) -> bool {
        matches!(
            self,
            CombinerKind::FeatConcat | CombinerKind::ScalarGate | CombinerKind::FineGrainedGate
        )
    }

    pub fn needs_chars(self) -> bool {
        self != CombinerKind::WordOnly
    }

    pub fn output_dim(self, embed_dim: usize, feature_dim: usize) -> usize {
        match self {
            CombinerKind::WordOnly
            | CombinerKind::CharOnly
            | CombinerKind::ScalarGate
            | CombinerKind::FineGrainedGate => embed_dim,
            CombinerKind::Concat => 2 * embed_dim,
            CombinerKind::FeatConcat => 2 * embed_dim + feature_dim,
        }
    }

    /// Short name used on the command line.
    pub fn cli_name(self) -> &'static str {
        match self {
            CombinerKind::WordOnly => "word",
            CombinerKind::CharOnly => "char",
            CombinerKind::Concat => "concat",
            CombinerKind::FeatConcat => "featconcat",
            CombinerKind::ScalarGate => "scalargate",
            CombinerKind::FineGrainedGate => "finegate",
        }
    }
}

impl fmt::Display for CombinerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for CombinerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CombinerKind::ALL
            .into_iter()
            .find(|k| k.cli_name() == s)
            .ok_or_else(|| Error::contract(format!("unknown combiner {s:?}")))
    }
}

/// Character-level representation `c`: the last hidden state of a GRU run over
/// the token's character embeddings.
pub fn char_encode<'t>(
    tape: &'t Tape<'t>,
    rnn: &Rnn<GruParams>,
    char_ids: &[usize],
    char_embedding: &EmbeddingTable,
) -> Result<Var<'t>> {
    if char_ids.is_empty() {
        return Err(Error::EmptySequence("char_encode"));
    }
    let chars = char_embedding.lookup(tape, char_ids)?;
    run_sequence(tape, rnn, chars, Mode::LastState)
}

/// `g = σ(W_g v + b_g)`.
pub fn compute_gate<'t>(tape: &'t Tape<'t>, params: &WordCharGateParams, v: Var<'t>) -> Result<Var<'t>> {
    if v.shape() != [params.feature_dim] {
        return Err(Error::dim("compute_gate", &v.shape(), &[params.feature_dim]));
    }
    Ok(tape
        .param(params.w_g)
        .matmul(v)?
        .add(tape.param(params.b_g))?
        .sigmoid())
}

/// `s = σ(w_s · v + b_s)` as a one-element value.
pub fn compute_scalar_gate<'t>(tape: &'t Tape<'t>, params: &ScalarGateParams, v: Var<'t>) -> Result<Var<'t>> {
    if v.shape() != [params.feature_dim] {
        return Err(Error::dim("compute_scalar_gate", &v.shape(), &[params.feature_dim]));
    }
    Ok(tape
        .param(params.w_s)
        .matmul(v)?
        .add(tape.param(params.b_s))?
        .sigmoid())
}

/// Combines the character view `c` and word view `word_vec` (`E w`).
pub fn combine<'t>(
    tape: &'t Tape<'t>,
    kind: CombinerKind,
    c: Var<'t>,
    word_vec: Var<'t>,
    v: Option<Var<'t>>,
    gate: Option<&GateParams>,
) -> Result<Var<'t>> {
    let need_v = || v.ok_or_else(|| Error::contract(format!("{kind} combiner needs a feature vector")));
    match kind {
        CombinerKind::WordOnly => Ok(word_vec),
        CombinerKind::CharOnly => Ok(c),
        CombinerKind::Concat => Var::concat(&[word_vec, c]),
        CombinerKind::FeatConcat => Var::concat(&[word_vec, c, need_v()?]),
        CombinerKind::FineGrainedGate => {
            let Some(GateParams::FineGrained(p)) = gate else {
                return Err(Error::contract("fine-grained gate combiner needs W_g and b_g"));
            };
            let g = compute_gate(tape, p, need_v()?)?;
            c.mul(g)?.add(word_vec.mul(g.one_minus())?)
        }
        CombinerKind::ScalarGate => {
            let Some(GateParams::Scalar(p)) = gate else {
                return Err(Error::contract("scalar gate combiner needs w_s and b_s"));
            };
            let s = compute_scalar_gate(tape, p, need_v()?)?;
            c.scale_by(s)?.add(word_vec.scale_by(s.one_minus())?)
        }
    }
}

/// Character encoder: character embedding table plus GRU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharEncoder {
    pub embedding: EmbeddingTable,
    pub rnn: Rnn<GruParams>,
}

impl CharEncoder {
    /// The GRU output width equals `output_dim` (split across directions when
    /// bidirectional).
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        alphabet: usize,
        char_dim: usize,
        output_dim: usize,
        direction: Direction,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dirs = direction.num_directions();
        if output_dim % dirs != 0 {
            return Err(Error::contract(format!(
                "char encoder width {output_dim} does not split across {dirs} directions"
            )));
        }
        let embedding = EmbeddingTable::new(params, &format!("{name}.embed"), alphabet, char_dim, 0.5, true, rng)?;
        let rnn = Rnn::gru(params, &format!("{name}.gru"), char_dim, output_dim / dirs, direction, rng)?;
        Ok(CharEncoder { embedding, rnn })
    }

    pub fn encode<'t>(&self, tape: &'t Tape<'t>, char_ids: &[usize]) -> Result<Var<'t>> {
        char_encode(tape, &self.rnn, char_ids, &self.embedding)
    }
}

/// Everything needed to turn a [`Token`] into its representation vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEncoder {
    pub kind: CombinerKind,
    pub words: EmbeddingTable,
    pub chars: Option<CharEncoder>,
    pub gate: Option<GateParams>,
    pub tags: TagVocab,
}

/// Per-forward-pass memo so repeated tokens share one subgraph.
#[derive(Default)]
pub struct EncodeCache<'t> {
    chars: HashMap<Vec<usize>, Var<'t>>,
    tokens: HashMap<Token, Var<'t>>,
}

impl<'t> EncodeCache<'t> {
    pub fn new() -> Self {
        EncodeCache {
            chars: HashMap::new(),
            tokens: HashMap::new(),
        }
    }
}

impl TokenEncoder {
    pub fn feature_dim(&self) -> usize {
        self.tags.feature_len(self.words.dim)
    }

    pub fn output_dim(&self) -> usize {
        self.kind.output_dim(self.words.dim, self.feature_dim())
    }

    /// Representation of one token.
    pub fn encode_token<'t>(
        &self,
        tape: &'t Tape<'t>,
        token: &Token,
        cache: &mut EncodeCache<'t>,
    ) -> Result<Var<'t>> {
        if let Some(&h) = cache.tokens.get(token) {
            return Ok(h);
        }
        let ew = self.words.lookup_one(tape, token.word_id)?;
        let c = match (&self.chars, self.kind.needs_chars()) {
            (Some(enc), true) => match cache.chars.get(&token.char_ids) {
                Some(&c) => c,
                None => {
                    let c = enc.encode(tape, &token.char_ids)?;
                    cache.chars.insert(token.char_ids.clone(), c);
                    c
                }
            },
            (None, true) => return Err(Error::contract(format!("{} combiner needs a char encoder", self.kind))),
            _ => ew,
        };
        let v = if self.kind.needs_features() {
            Some(feature_vector_with(tape, token, ew, &self.tags)?)
        } else {
            None
        };
        let h = combine(tape, self.kind, c, ew, v, self.gate.as_ref())?;
        cache.tokens.insert(token.clone(), h);
        Ok(h)
    }

    /// `[tokens.len(), output_dim]` matrix of representations.
    pub fn encode_sequence<'t>(
        &self,
        tape: &'t Tape<'t>,
        tokens: &[Token],
        cache: &mut EncodeCache<'t>,
    ) -> Result<Var<'t>> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence("encode_sequence"));
        }
        let rows = tokens
            .iter()
            .map(|t| self.encode_token(tape, t, cache))
            .collect::<Result<Vec<_>>>()?;
        Var::stack_rows(&rows)
    }

    /// Fine-grained gate vector `g` for a token, if this encoder has one.
    pub fn gate_values<'t>(&self, tape: &'t Tape<'t>, token: &Token) -> Result<Option<Var<'t>>> {
        let Some(GateParams::FineGrained(p)) = &self.gate else {
            return Ok(None);
        };
        let ew = self.words.lookup_one(tape, token.word_id)?;
        let v = feature_vector_with(tape, token, ew, &self.tags)?;
        compute_gate(tape, p, v).map(Some)
    }
}

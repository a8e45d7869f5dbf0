//! Document-query interaction `H_p = r(P, Q)`.
//!
//! Fine-grained gating forms `I_ij = tanh(p_i ⊙ q_j)` for every document/query
//! pair and attends over `j`:
//!
//! ```text
//! h_i = Σ_j softmax_j(u_h · I_ij + [w_i = w_j] b_h1 + b_h2) I_ij
//! ```
//!
//! Gated attention multiplies each `p_i` by an attention-pooled query vector.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest `M·N·d` interaction tensor fine-grained gating will build.
pub const MAX_INTERACTION_ELEMENTS: usize = 100_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    GatedAttention,
    FineGrained,
}

impl Interaction {
    pub fn cli_name(self) -> &'static str {
        match self {
            Interaction::GatedAttention => "ga",
            Interaction::FineGrained => "fg",
        }
    }
}

impl fmt::Display for Interaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for Interaction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ga" => Ok(Interaction::GatedAttention),
            "fg" => Ok(Interaction::FineGrained),
            _ => Err(Error::contract(format!("unknown interaction {s:?}"))),
        }
    }
}

/// Document states `P[M, d]` and query states `Q[N, d]` of one layer, with
/// the word ids of their tokens.
#[derive(Clone, Copy)]
pub struct LayerState<'t, 'a> {
    pub p: Var<'t>,
    pub q: Var<'t>,
    pub doc_word_ids: &'a [usize],
    pub query_word_ids: &'a [usize],
}

impl<'t, 'a> LayerState<'t, 'a> {
    pub fn new(p: Var<'t>, q: Var<'t>, doc_word_ids: &'a [usize], query_word_ids: &'a [usize]) -> Result<Self> {
        let (ps, qs) = (p.shape(), q.shape());
        if ps.len() != 2 || qs.len() != 2 || ps[1] != qs[1] {
            return Err(Error::dim("layer_state", &ps, &qs));
        }
        if ps[0] != doc_word_ids.len() || qs[0] != query_word_ids.len() {
            return Err(Error::contract(format!(
                "layer state has {}x{} states but {}x{} word ids",
                ps[0],
                qs[0],
                doc_word_ids.len(),
                query_word_ids.len()
            )));
        }
        Ok(LayerState {
            p,
            q,
            doc_word_ids,
            query_word_ids,
        })
    }

    pub fn doc_len(&self) -> usize {
        self.doc_word_ids.len()
    }

    pub fn query_len(&self) -> usize {
        self.query_word_ids.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.p.shape()[1]
    }

    /// `[M, N]` matrix with 1 where the document and query word ids agree.
    pub fn match_matrix(&self) -> Tensor {
        let data = self
            .doc_word_ids
            .iter()
            .flat_map(|&a| self.query_word_ids.iter().map(move |&b| if a == b { 1.0 } else { 0.0 }))
            .collect();
        Tensor::from_parts(vec![self.doc_len(), self.query_len()], data)
    }
}

/// `u_h` (length `d`) and the scalars `b_h1`, `b_h2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocQueryGateParams {
    pub u_h: ParamId,
    pub b_h1: ParamId,
    pub b_h2: ParamId,
    pub dim: usize,
}

impl DocQueryGateParams {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape(vec![dim]));
        }
        let u_h = params.add_uniform(format!("{name}.u_h"), &[dim], scale, rng);
        let b_h1 = params.add(format!("{name}.b_h1"), Tensor::zeros(&[1])?);
        let b_h2 = params.add(format!("{name}.b_h2"), Tensor::zeros(&[1])?);
        Ok(DocQueryGateParams { u_h, b_h1, b_h2, dim })
    }
}

/// `tanh(p ⊙ q)` for two vectors.
pub fn fg_interaction<'t>(p: Var<'t>, q: Var<'t>) -> Result<Var<'t>> {
    if p.shape() != q.shape() || p.shape().len() != 1 {
        return Err(Error::dim("fg_interaction", &p.shape(), &q.shape()));
    }
    Ok(p.mul(q)?.tanh())
}

/// Attention weights `[M, N]` and output `[M, d]` of fine-grained gating.
pub fn fg_attend_with_weights<'t>(
    tape: &'t Tape<'t>,
    state: &LayerState<'t, '_>,
    params: &DocQueryGateParams,
) -> Result<(Var<'t>, Var<'t>)> {
    let (m, n, d) = (state.doc_len(), state.query_len(), state.hidden_dim());
    if params.dim != d {
        return Err(Error::dim("fg_attend", &[params.dim], &[d]));
    }
    let elements = m.saturating_mul(n).saturating_mul(d);
    if elements > MAX_INTERACTION_ELEMENTS {
        return Err(Error::contract(format!(
            "interaction tensor {m}x{n}x{d} exceeds {MAX_INTERACTION_ELEMENTS} elements"
        )));
    }
    let inter = state.p.pairwise_mul(state.q)?.tanh();
    let logits = inter
        .contract_last(tape.param(params.u_h))?
        .add_scaled_const(state.match_matrix(), tape.param(params.b_h1))?
        .add_scalar(tape.param(params.b_h2))?;
    let weights = logits.softmax()?;
    let out = weights.weighted_sum(inter)?;
    Ok((weights, out))
}

pub fn fg_attend<'t>(tape: &'t Tape<'t>, state: &LayerState<'t, '_>, params: &DocQueryGateParams) -> Result<Var<'t>> {
    fg_attend_with_weights(tape, state, params).map(|(_, out)| out)
}

/// Attention weights `[M, N]` and output `[M, d]` of gated attention.
pub fn ga_attend_with_weights<'t>(state: &LayerState<'t, '_>) -> Result<(Var<'t>, Var<'t>)> {
    let weights = state.p.matmul_nt(state.q)?.softmax()?;
    let pooled = weights.matmul(state.q)?;
    Ok((weights, state.p.mul(pooled)?))
}

pub fn ga_attend<'t>(state: &LayerState<'t, '_>) -> Result<Var<'t>> {
    ga_attend_with_weights(state).map(|(_, out)| out)
}

//! Finite-difference checks for every differentiable operation. Each check
//! builds fresh random inputs as parameters, projects the output onto a random
//! direction and returns the largest relative error over all coordinates.

use finegate::doc_query::{fg_attend, fg_interaction, ga_attend, DocQueryGateParams, Interaction, LayerState};
use finegate::gradcheck::GradCheck;
use finegate::reader::{HeadKind, Model};
use finegate::recurrent::{gru_step, lstm_step, GruParams, LstmParams};
use finegate::token_repr::{
    combine, compute_gate, compute_scalar_gate, CombinerKind, GateParams, ScalarGateParams, WordCharGateParams,
};
use finegate::{ParamId, ParamSet, Result, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_example, tiny_config, uniform_tensor};

pub const TOLERANCE: f64 = 1e-4;

pub type Check = fn(&mut ChaCha8Rng) -> f64;

pub const OPS: &[(&str, Check)] = &[
    ("add_sub_mul", add_sub_mul),
    ("scale_one_minus", scale_one_minus),
    ("sigmoid", sigmoid),
    ("tanh", tanh),
    ("scalar_broadcast", scalar_broadcast),
    ("matmul", matmul),
    ("matvec", matvec),
    ("matmul_nt", matmul_nt),
    ("add_row_bias", add_row_bias),
    ("softmax_vector", softmax_vector),
    ("softmax_rows", softmax_rows),
    ("nll", nll),
    ("sum_dot", sum_dot),
    ("concat_stack_slice", concat_stack_slice),
    ("gather", gather),
    ("pairwise_contract_weighted", pairwise_contract_weighted),
    ("gru_step", gru),
    ("lstm_step", lstm),
    ("compute_gate", gate),
    ("compute_scalar_gate", scalar_gate),
    ("combine_word_only", |r| combiner(CombinerKind::WordOnly, r)),
    ("combine_char_only", |r| combiner(CombinerKind::CharOnly, r)),
    ("combine_concat", |r| combiner(CombinerKind::Concat, r)),
    ("combine_feat_concat", |r| combiner(CombinerKind::FeatConcat, r)),
    ("combine_scalar_gate", |r| combiner(CombinerKind::ScalarGate, r)),
    ("combine_fine_gate", |r| combiner(CombinerKind::FineGrainedGate, r)),
    ("fg_interaction", interaction),
    ("fg_attend", fg),
    ("ga_attend", ga),
    ("reader_cloze_fg", |r| reader(HeadKind::Cloze, CombinerKind::FineGrainedGate, Interaction::FineGrained, r)),
    ("reader_cloze_ga", |r| reader(HeadKind::Cloze, CombinerKind::Concat, Interaction::GatedAttention, r)),
    ("reader_span_fg", |r| reader(HeadKind::Span, CombinerKind::ScalarGate, Interaction::FineGrained, r)),
    ("reader_tags", |r| reader(HeadKind::TagPredict, CombinerKind::FineGrainedGate, Interaction::FineGrained, r)),
];

/// Largest relative error of `check` over `seeds` random instances.
pub fn max_error(check: Check, seeds: u64, salt: u64) -> f64 {
    (0..seeds)
        .map(|s| check(&mut ChaCha8Rng::seed_from_u64(s.wrapping_mul(0x9E37_79B9).wrapping_add(salt))))
        .fold(0.0, f64::max)
}

pub fn run_all(seeds: u64) -> Vec<(&'static str, f64)> {
    OPS.iter()
        .enumerate()
        .map(|(i, (name, check))| (*name, max_error(*check, seeds, i as u64)))
        .collect()
}

/// Checks `sum(f(tape) ⊙ R)` for a random `R` of the output's shape.
fn projected<F>(params: &ParamSet, rng: &mut ChaCha8Rng, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<'t>) -> Result<Var<'t>>,
{
    let shape = {
        let tape = Tape::new(params);
        f(&tape).unwrap().shape()
    };
    let r = uniform_tensor(&shape, rng);
    let report = GradCheck::default()
        .run(params, |tape| Ok(f(tape)?.mul(tape.constant(r.clone()))?.sum()))
        .unwrap();
    report.max_rel_err
}

fn input(ps: &mut ParamSet, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> ParamId {
    ps.add_uniform(name, shape, 1.0, rng)
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=4))
}

fn add_sub_mul(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n) = dims(rng);
    let mut ps = ParamSet::new();
    let a = input(&mut ps, "a", &[m, n], rng);
    let b = input(&mut ps, "b", &[m, n], rng);
    projected(&ps, rng, |t| {
        let (a, b) = (t.param(a), t.param(b));
        a.add(b)?.mul(a.sub(b)?)?.mul(a)
    })
}

fn scale_one_minus(rng: &mut ChaCha8Rng) -> f64 {
    let mut ps = ParamSet::new();
    let n = rng.gen_range(1..=6);
    let a = input(&mut ps, "a", &[n], rng);
    let k = rng.gen_range(-2.0..2.0);
    projected(&ps, rng, |t| {
        let a = t.param(a);
        a.scale(k).one_minus().mul(a)
    })
}

fn sigmoid(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n) = dims(rng);
    let mut ps = ParamSet::new();
    let a = ps.add_uniform("a", &[m, n], 3.0, rng);
    projected(&ps, rng, |t| Ok(t.param(a).sigmoid()))
}

fn tanh(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n) = dims(rng);
    let mut ps = ParamSet::new();
    let a = ps.add_uniform("a", &[m, n], 3.0, rng);
    projected(&ps, rng, |t| Ok(t.param(a).tanh()))
}

fn scalar_broadcast(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n) = dims(rng);
    let mut ps = ParamSet::new();
    let a = input(&mut ps, "a", &[m, n], rng);
    let s = input(&mut ps, "s", &[1], rng);
    let k = uniform_tensor(&[m, n], rng);
    projected(&ps, rng, |t| {
        let (a, s) = (t.param(a), t.param(s));
        a.scale_by(s)?.add_scalar(s)?.add_scaled_const(k.clone(), s)?.mul(a)
    })
}

fn matmul(rng: &mut ChaCha8Rng) -> f64 {
    let (m, k) = dims(rng);
    let n = rng.gen_range(1..=4);
    let mut ps = ParamSet::new();
    let a = input(&mut ps, "a", &[m, k], rng);
    let b = input(&mut ps, "b", &[k, n], rng);
    projected(&ps, rng, |t| t.param(a).matmul(t.param(b)))
}

fn matvec(rng: &mut ChaCha8Rng) -> f64 {
    let (m, k) = dims(rng);
    let mut ps = ParamSet::new();
    let a = input(&mut ps, "a", &[m, k], rng);
    let x = input(&mut ps, "x", &[k], rng);
    projected(&ps, rng, |t| t.param(a).matmul(t.param(x)))
}

fn matmul_nt(rng: &mut ChaCha8Rng) -> f64 {
    let (m, k) = dims(rng);
    let n = rng.gen_range(1..=4);
    let mut ps = ParamSet::new();
    let a = input(&mut ps, "a", &[m, k], rng);
    let b = input(&mut ps, "b", &[n, k], rng);
    projected(&ps, rng, |t| t.param(a).matmul_nt(t.param(b)))
}

fn add_row_bias(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n) = dims(rng);
    let mut ps = ParamSet::new();
    let a = input(&mut ps, "a", &[m, n], rng);
    let b = input(&mut ps, "b", &[n], rng);
    projected(&ps, rng, |t| t.param(a).add_row_bias(t.param(b)))
}

fn softmax_vector(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(1..=8);
    let mut ps = ParamSet::new();
    let a = ps.add_uniform("a", &[n], 3.0, rng);
    projected(&ps, rng, |t| t.param(a).softmax())
}

fn softmax_rows(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n) = dims(rng);
    let mut ps = ParamSet::new();
    let a = ps.add_uniform("a", &[m, n], 3.0, rng);
    projected(&ps, rng, |t| t.param(a).softmax())
}

fn nll(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(2..=8);
    let mut ps = ParamSet::new();
    let a = ps.add_uniform("a", &[n], 3.0, rng);
    let mut targets: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.4)).collect();
    if targets.is_empty() {
        targets.push(rng.gen_range(0..n));
    }
    projected(&ps, rng, |t| t.param(a).nll(&targets))
}

fn sum_dot(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n) = dims(rng);
    let mut ps = ParamSet::new();
    let a = input(&mut ps, "a", &[m, n], rng);
    let b = input(&mut ps, "b", &[m, n], rng);
    projected(&ps, rng, |t| {
        let (a, b) = (t.param(a), t.param(b));
        Ok(a.dot(b)?.mul(a.sum())?.tanh())
    })
}

fn concat_stack_slice(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(2..=4);
    let mut ps = ParamSet::new();
    let a = input(&mut ps, "a", &[n], rng);
    let b = input(&mut ps, "b", &[n], rng);
    let c = input(&mut ps, "c", &[3, 2], rng);
    projected(&ps, rng, |t| {
        let (a, b, c) = (t.param(a), t.param(b), t.param(c));
        let v = Var::concat(&[a, b.tanh()])?;
        let rows = Var::stack_rows(&[v.slice(1, 2)?, b.slice(0, 2)?, c.row(2)?])?;
        Var::concat_cols(&[rows, c.mul(c)?])
    })
}

fn gather(rng: &mut ChaCha8Rng) -> f64 {
    let (rows, dim) = (rng.gen_range(2..=5), rng.gen_range(1..=4));
    let mut ps = ParamSet::new();
    let table = input(&mut ps, "table", &[rows, dim], rng);
    let ids: Vec<usize> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..rows)).collect();
    projected(&ps, rng, |t| Ok(t.gather(table, &ids)?.tanh()))
}

fn pairwise_contract_weighted(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n) = dims(rng);
    let d = rng.gen_range(1..=4);
    let mut ps = ParamSet::new();
    let p = input(&mut ps, "p", &[m, d], rng);
    let q = input(&mut ps, "q", &[n, d], rng);
    let u = input(&mut ps, "u", &[d], rng);
    let w = input(&mut ps, "w", &[m, n], rng);
    projected(&ps, rng, |t| {
        let inter = t.param(p).pairwise_mul(t.param(q))?;
        let logits = inter.contract_last(t.param(u))?;
        logits.mul(t.param(w))?.weighted_sum(inter)
    })
}

fn gru(rng: &mut ChaCha8Rng) -> f64 {
    let (i, h) = dims(rng);
    let mut ps = ParamSet::new();
    let cell = GruParams::new(&mut ps, "gru", i, h, rng).unwrap();
    *ps.get_mut(cell.b) = uniform_tensor(&[3 * h], rng);
    let x = input(&mut ps, "x", &[i], rng);
    let h0 = input(&mut ps, "h", &[h], rng);
    projected(&ps, rng, |t| {
        let h1 = gru_step(t, &cell, t.param(x), t.param(h0))?;
        gru_step(t, &cell, t.param(x).scale(0.5), h1)
    })
}

fn lstm(rng: &mut ChaCha8Rng) -> f64 {
    let (i, h) = dims(rng);
    let mut ps = ParamSet::new();
    let cell = LstmParams::new(&mut ps, "lstm", i, h, 1.0, rng).unwrap();
    *ps.get_mut(cell.b) = uniform_tensor(&[4 * h], rng);
    let x = input(&mut ps, "x", &[i], rng);
    let s0 = input(&mut ps, "s", &[2 * h], rng);
    projected(&ps, rng, |t| {
        let s1 = lstm_step(t, &cell, t.param(x), t.param(s0))?;
        lstm_step(t, &cell, t.param(x).scale(-0.5), s1)
    })
}

fn gate(rng: &mut ChaCha8Rng) -> f64 {
    let (d_e, d_v) = (rng.gen_range(1..=4), rng.gen_range(1..=8));
    let mut ps = ParamSet::new();
    let g = WordCharGateParams::new(&mut ps, "gate", d_e, d_v, 1.0, rng).unwrap();
    *ps.get_mut(g.b_g) = uniform_tensor(&[d_e], rng);
    let v = input(&mut ps, "v", &[d_v], rng);
    projected(&ps, rng, |t| compute_gate(t, &g, t.param(v)))
}

fn scalar_gate(rng: &mut ChaCha8Rng) -> f64 {
    let d_v = rng.gen_range(1..=8);
    let mut ps = ParamSet::new();
    let g = ScalarGateParams::new(&mut ps, "gate", d_v, 1.0, rng).unwrap();
    *ps.get_mut(g.b_s) = uniform_tensor(&[1], rng);
    let v = input(&mut ps, "v", &[d_v], rng);
    projected(&ps, rng, |t| compute_scalar_gate(t, &g, t.param(v)))
}

fn combiner(kind: CombinerKind, rng: &mut ChaCha8Rng) -> f64 {
    let (d_e, extra) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let d_v = d_e + extra;
    let mut ps = ParamSet::new();
    let gate = match kind {
        CombinerKind::FineGrainedGate => {
            let g = WordCharGateParams::new(&mut ps, "gate", d_e, d_v, 1.0, rng).unwrap();
            *ps.get_mut(g.b_g) = uniform_tensor(&[d_e], rng);
            Some(GateParams::FineGrained(g))
        }
        CombinerKind::ScalarGate => {
            let g = ScalarGateParams::new(&mut ps, "gate", d_v, 1.0, rng).unwrap();
            *ps.get_mut(g.b_s) = uniform_tensor(&[1], rng);
            Some(GateParams::Scalar(g))
        }
        _ => None,
    };
    let c = input(&mut ps, "c", &[d_e], rng);
    let ew = input(&mut ps, "ew", &[d_e], rng);
    let prefix = input(&mut ps, "prefix", &[extra], rng);
    projected(&ps, rng, |t| {
        let ew = t.param(ew);
        let v = Var::concat(&[t.param(prefix), ew])?;
        combine(t, kind, t.param(c), ew, Some(v), gate.as_ref())
    })
}

fn interaction(rng: &mut ChaCha8Rng) -> f64 {
    let d = rng.gen_range(1..=6);
    let mut ps = ParamSet::new();
    let p = ps.add_uniform("p", &[d], 2.0, rng);
    let q = ps.add_uniform("q", &[d], 2.0, rng);
    projected(&ps, rng, |t| fg_interaction(t.param(p), t.param(q)))
}

fn word_ids(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..3)).collect()
}

fn fg(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n) = dims(rng);
    let d = rng.gen_range(1..=4);
    let mut ps = ParamSet::new();
    let p = input(&mut ps, "p", &[m, d], rng);
    let q = input(&mut ps, "q", &[n, d], rng);
    let g = DocQueryGateParams::new(&mut ps, "fg", d, 1.0, rng).unwrap();
    *ps.get_mut(g.b_h1) = uniform_tensor(&[1], rng);
    *ps.get_mut(g.b_h2) = uniform_tensor(&[1], rng);
    let (dids, qids) = (word_ids(m, rng), word_ids(n, rng));
    projected(&ps, rng, |t| {
        let state = LayerState::new(t.param(p), t.param(q), &dids, &qids)?;
        fg_attend(t, &state, &g)
    })
}

fn ga(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n) = dims(rng);
    let d = rng.gen_range(1..=4);
    let mut ps = ParamSet::new();
    let p = input(&mut ps, "p", &[m, d], rng);
    let q = input(&mut ps, "q", &[n, d], rng);
    let (dids, qids) = (word_ids(m, rng), word_ids(n, rng));
    projected(&ps, rng, |t| {
        let state = LayerState::new(t.param(p), t.param(q), &dids, &qids)?;
        ga_attend(&state)
    })
}

/// Full K=2 reader loss, checked over every coordinate of every parameter.
fn reader(head: HeadKind, combiner: CombinerKind, interaction: Interaction, rng: &mut ChaCha8Rng) -> f64 {
    let mut config = tiny_config(head, rng.gen());
    config.combiner = combiner;
    config.interaction = interaction;
    config.embed_init = 0.5;
    let mut model = Model::new(config.clone()).unwrap();
    for id in model.params.ids().collect::<Vec<_>>() {
        let t = model.params.get_mut(id);
        for x in t.data_mut() {
            *x += rng.gen_range(-0.2..0.2);
        }
    }
    let ex = random_example(&config, rng);
    GradCheck::default()
        .run(&model.params, |tape| {
            let out = model.forward(tape, &ex.document, &ex.query, None)?;
            model.loss(&out, &ex.document, &ex.answer)
        })
        .unwrap()
        .max_rel_err
}

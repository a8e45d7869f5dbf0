//! Checks behind the acceptance report. Each returns whether the criterion
//! holds and a one-line summary of what was measured.

use std::collections::HashSet;
use std::time::Instant;

use finegate::doc_query::{fg_attend_with_weights, ga_attend_with_weights, DocQueryGateParams, Interaction, LayerState};
use finegate::harness::checkpoint;
use finegate::harness::gate_report::gate_report;
use finegate::harness::metrics::{evaluate_tags, exact_match, majority_precision_at_1, token_f1};
use finegate::harness::synth::{self, SynthConfig};
use finegate::harness::{evaluate, train, Dataset, DatasetFiles, OptimizerConfig, TrainConfig};
use finegate::reader::{predict_cloze, predict_span, Answer, Example, HeadKind, Model, ModelConfig};
use finegate::token_repr::{combine, CombinerKind, GateParams, ScalarGateParams, WordCharGateParams};
use finegate::{Execution, ParamSet, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_suite, oracles, random_example, tiny_config, uniform_tensor, uniform_vec};

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: String) -> Self {
        Outcome { passed, detail }
    }
}

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = grad_suite::run_all(100);
    let secs = start.elapsed().as_secs_f64();
    let (worst_name, worst) = results
        .iter()
        .cloned()
        .fold(("", 0.0), |acc, r| if r.1 > acc.1 { r } else { acc });
    let failing: Vec<&str> = results
        .iter()
        .filter(|r| !(r.1 < grad_suite::TOLERANCE))
        .map(|r| r.0)
        .collect();
    Outcome::new(
        failing.is_empty() && secs < 60.0,
        format!(
            "{} ops x 100 seeds, worst rel err {worst:.2e} ({worst_name}), failing {failing:?}, {secs:.1}s",
            results.len()
        ),
    )
}

/// Fine-grained and scalar gate combiners over one parameter set.
struct GateFixture {
    params: ParamSet,
    fine: GateParams,
    scalar: GateParams,
    d_e: usize,
    d_v: usize,
}

impl GateFixture {
    fn new(d_e: usize, d_v: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let fine = WordCharGateParams::new(&mut params, "fine", d_e, d_v, 1.0, rng).unwrap();
        let scalar = ScalarGateParams::new(&mut params, "scalar", d_v, 1.0, rng).unwrap();
        GateFixture {
            params,
            fine: GateParams::FineGrained(fine),
            scalar: GateParams::Scalar(scalar),
            d_e,
            d_v,
        }
    }

    fn fine_ids(&self) -> &WordCharGateParams {
        match &self.fine {
            GateParams::FineGrained(p) => p,
            _ => unreachable!(),
        }
    }

    fn scalar_ids(&self) -> &ScalarGateParams {
        match &self.scalar {
            GateParams::Scalar(p) => p,
            _ => unreachable!(),
        }
    }

    /// Returns `(h, g)` of the fine-grained combiner, or `(h, [s])` of the
    /// scalar one.
    fn run(&self, kind: CombinerKind, c: &[f64], ew: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let tape = Tape::new(&self.params);
        let cv = tape.constant(Tensor::vector(c.to_vec()).unwrap());
        let ev = tape.constant(Tensor::vector(ew.to_vec()).unwrap());
        let vv = tape.constant(Tensor::vector(v.to_vec()).unwrap());
        let gate = if kind == CombinerKind::FineGrainedGate {
            &self.fine
        } else {
            &self.scalar
        };
        let h = combine(&tape, kind, cv, ev, Some(vv), Some(gate)).unwrap();
        let g = match gate {
            GateParams::FineGrained(p) => finegate::token_repr::compute_gate(&tape, p, vv).unwrap(),
            GateParams::Scalar(p) => finegate::token_repr::compute_scalar_gate(&tape, p, vv).unwrap(),
        };
        (h.value().into_data(), g.value().into_data())
    }
}

pub fn gate_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    // (a) every coordinate of h lies between c and Ew
    let mut sandwich_violations = 0;
    let mut eq_violations = 0;
    for _ in 0..10_000 {
        let d_e = rng.gen_range(1..=8);
        let d_v = d_e + rng.gen_range(0..=6);
        let mut fx = GateFixture::new(d_e, d_v, &mut rng);
        *fx.params.get_mut(fx.fine_ids().w_g) = uniform_tensor(&[d_e, d_v], &mut rng);
        let b_g = fx.fine_ids().b_g;
        *fx.params.get_mut(b_g) = Tensor::vector(uniform_vec(d_e, &mut rng).iter().map(|x| 4.0 * x).collect()).unwrap();
        let c = uniform_vec(d_e, &mut rng).iter().map(|x| 5.0 * x).collect::<Vec<_>>();
        let ew = uniform_vec(d_e, &mut rng).iter().map(|x| 5.0 * x).collect::<Vec<_>>();
        let v = uniform_vec(d_v, &mut rng);
        let (h, g) = fx.run(CombinerKind::FineGrainedGate, &c, &ew, &v);
        for k in 0..d_e {
            let (lo, hi) = (c[k].min(ew[k]), c[k].max(ew[k]));
            if !(lo <= h[k] && h[k] <= hi) {
                sandwich_violations += 1;
            }
            let expect = g[k] * c[k] + (1.0 - g[k]) * ew[k];
            if (h[k] - expect).abs() > 1e-12 {
                eq_violations += 1;
            }
        }
    }

    // (b) saturated gates select one side
    let mut saturated_err: f64 = 0.0;
    for bias in [60.0, -60.0] {
        for _ in 0..100 {
            let d_e = rng.gen_range(1..=8);
            let d_v = d_e + 3;
            let fx = {
                let mut fx = GateFixture::new(d_e, d_v, &mut rng);
                let ids = fx.fine_ids().clone();
                *fx.params.get_mut(ids.w_g) = Tensor::zeros(&[d_e, d_v]).unwrap();
                *fx.params.get_mut(ids.b_g) = Tensor::full(&[d_e], bias).unwrap();
                fx
            };
            let c = uniform_vec(d_e, &mut rng);
            let ew = uniform_vec(d_e, &mut rng);
            let v = uniform_vec(d_v, &mut rng);
            let (h, _) = fx.run(CombinerKind::FineGrainedGate, &c, &ew, &v);
            let target = if bias > 0.0 { &c } else { &ew };
            for k in 0..d_e {
                saturated_err = saturated_err.max((h[k] - target[k]).abs());
            }
        }
    }

    // (c) identical rows of W_g reproduce the scalar gate
    let mut replicated_err: f64 = 0.0;
    for _ in 0..1_000 {
        let d_e = rng.gen_range(1..=8);
        let d_v = d_e + rng.gen_range(0..=6);
        let mut fx = GateFixture::new(d_e, d_v, &mut rng);
        let row = uniform_vec(d_v, &mut rng);
        let b = rng.gen_range(-2.0..2.0);
        let (fine, scalar) = (fx.fine_ids().clone(), fx.scalar_ids().clone());
        *fx.params.get_mut(fine.w_g) = Tensor::new(vec![d_e, d_v], row.repeat(d_e)).unwrap();
        *fx.params.get_mut(fine.b_g) = Tensor::full(&[d_e], b).unwrap();
        *fx.params.get_mut(scalar.w_s) = Tensor::new(vec![1, d_v], row).unwrap();
        *fx.params.get_mut(scalar.b_s) = Tensor::full(&[1], b).unwrap();
        let c = uniform_vec(fx.d_e, &mut rng);
        let ew = uniform_vec(fx.d_e, &mut rng);
        let v = uniform_vec(fx.d_v, &mut rng);
        let (hf, _) = fx.run(CombinerKind::FineGrainedGate, &c, &ew, &v);
        let (hs, _) = fx.run(CombinerKind::ScalarGate, &c, &ew, &v);
        for k in 0..d_e {
            replicated_err = replicated_err.max((hf[k] - hs[k]).abs());
        }
    }

    Outcome::new(
        sandwich_violations == 0 && eq_violations == 0 && saturated_err <= 1e-9 && replicated_err <= 1e-12,
        format!(
            "sandwich violations {sandwich_violations}/10000 triples, formula violations {eq_violations}, \
             saturated err {saturated_err:.1e}, replicated-row err {replicated_err:.1e}"
        ),
    )
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

pub fn attention_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut fg_err, mut ga_err, mut sum_err, mut shift_err): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..1_000 {
        let (m, n, d) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=16));
        let p = uniform_tensor(&[m, d], &mut rng);
        let q = uniform_tensor(&[n, d], &mut rng);
        let doc_ids: Vec<usize> = (0..m).map(|_| rng.gen_range(0..4)).collect();
        let query_ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let mut params = ParamSet::new();
        let g = DocQueryGateParams::new(&mut params, "fg", d, 1.0, &mut rng).unwrap();
        let (b1, b2) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        *params.get_mut(g.b_h1) = Tensor::full(&[1], b1).unwrap();
        *params.get_mut(g.b_h2) = Tensor::full(&[1], b2).unwrap();
        let u = params.get(g.u_h).data().to_vec();

        let fg_out = |params: &ParamSet| {
            let tape = Tape::new(params);
            let state =
                LayerState::new(tape.constant(p.clone()), tape.constant(q.clone()), &doc_ids, &query_ids).unwrap();
            let (w, h) = fg_attend_with_weights(&tape, &state, &g).unwrap();
            (rows(&w.value()), rows(&h.value()))
        };
        let (w, h) = fg_out(&params);
        let (ow, oh) = oracles::fg_attend(&rows(&p), &rows(&q), &doc_ids, &query_ids, &u, b1, b2);
        fg_err = fg_err.max(max_diff(&w, &ow)).max(max_diff(&h, &oh));
        for r in &w {
            sum_err = sum_err.max((r.iter().sum::<f64>() - 1.0).abs());
        }

        let mut shifted = params.clone();
        *shifted.get_mut(g.b_h2) = Tensor::full(&[1], b2 + rng.gen_range(-5.0..5.0)).unwrap();
        let (_, hs) = fg_out(&shifted);
        shift_err = shift_err.max(max_diff(&h, &hs));

        let tape = Tape::new(&params);
        let state = LayerState::new(tape.constant(p.clone()), tape.constant(q.clone()), &doc_ids, &query_ids).unwrap();
        let (gw, gh) = ga_attend_with_weights(&state).unwrap();
        let (ogw, ogh) = oracles::ga_attend(&rows(&p), &rows(&q));
        ga_err = ga_err.max(max_diff(&rows(&gw.value()), &ogw)).max(max_diff(&rows(&gh.value()), &ogh));
        for r in rows(&gw.value()) {
            sum_err = sum_err.max((r.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Outcome::new(
        fg_err <= 1e-10 && ga_err <= 1e-10 && sum_err <= 1e-9 && shift_err <= 1e-12,
        format!(
            "1000 instances: fg err {fg_err:.1e}, ga err {ga_err:.1e}, weight-sum err {sum_err:.1e}, \
             b_h2 shift err {shift_err:.1e}"
        ),
    )
}

/// Five pointer-sum cases: (probabilities, document word ids, candidates,
/// expected answer). Expected answers were worked out by hand.
pub const CLOZE_FIXTURE: [(&[f64], &[usize], &[usize], usize); 5] = [
    // 7 collects 0.5 + 0.2 = 0.7 against 0.3
    (&[0.5, 0.3, 0.2], &[7, 9, 7], &[7, 9], 7),
    // the single largest position (0.4 on 1) loses to 2 with 0.35 + 0.25
    (&[0.4, 0.35, 0.25], &[1, 2, 2], &[1, 2], 2),
    // 3 gets 0.1 + 0.1 + 0.1 = 0.3, 4 gets 0.3 + 0.2 = 0.5, 5 gets 0.2
    (&[0.1, 0.3, 0.1, 0.2, 0.1, 0.2], &[3, 4, 3, 4, 3, 5], &[3, 4, 5], 4),
    // equal mass 0.5 each: the lower word id wins
    (&[0.25, 0.25, 0.25, 0.25], &[6, 2, 6, 2], &[6, 2], 2),
    // non-candidate 8 holds most mass and is ignored; 1 has 0.2 vs 0.1
    (&[0.7, 0.2, 0.1], &[8, 1, 0], &[0, 1], 1),
];

pub fn decoding_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut span_mismatches = 0;
    for i in 0..1_000 {
        let m = rng.gen_range(1..=20);
        // a coarse value grid makes ties common
        let draw = |rng: &mut ChaCha8Rng| {
            if i % 2 == 0 {
                rng.gen_range(0..4) as f64 / 4.0
            } else {
                rng.gen_range(0.0..1.0)
            }
        };
        let start: Vec<f64> = (0..m).map(|_| draw(&mut rng)).collect();
        let end: Vec<f64> = (0..m).map(|_| draw(&mut rng)).collect();
        let max_len = rng.gen_range(1..=m + 2);
        if predict_span(&start, &end, max_len).unwrap() != oracles::best_span(&start, &end, max_len) {
            span_mismatches += 1;
        }
    }
    let cloze_mismatches = CLOZE_FIXTURE
        .iter()
        .filter(|(p, ids, cands, want)| predict_cloze(p, ids, cands).unwrap() != *want)
        .count();
    Outcome::new(
        span_mismatches == 0 && cloze_mismatches == 0,
        format!("span mismatches {span_mismatches}/1000, pointer-sum fixture mismatches {cloze_mismatches}/5"),
    )
}

/// Gold ranks of a five-example fixture and its hand-computed P@1, R@10 and
/// mean rank.
pub const TAG_FIXTURE_RANKS: [usize; 5] = [1, 3, 12, 1, 8];
/// 2 of 5 at rank 1; 4 of 5 within 10; (1 + 3 + 12 + 1 + 8) / 5 = 5.
pub const TAG_FIXTURE_EXPECTED: (f64, f64, f64) = (0.4, 0.8, 5.0);

pub fn metric_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let words = ["a", "b", "c", "d", "e"];
    let mut violations = 0;
    let mut oracle_err: f64 = 0.0;
    for _ in 0..100 {
        let span = |rng: &mut ChaCha8Rng| -> Vec<&str> {
            (0..rng.gen_range(1..=5)).map(|_| words[rng.gen_range(0..words.len())]).collect()
        };
        let gold = span(&mut rng);
        let pred = if rng.gen_bool(0.3) { gold.clone() } else { span(&mut rng) };
        let (em, f1) = (exact_match(&pred, &gold), token_f1(&pred, &gold));
        if em > f1 {
            violations += 1;
        }
        oracle_err = oracle_err.max((f1 - oracles::token_f1(&pred, &gold)).abs());
    }
    let half = token_f1(&["a", "b"], &["b", "c"]);
    Outcome::new(
        violations == 0 && half == 0.5 && oracle_err < 1e-15,
        format!("EM > F1 on {violations}/100 cases, F1(\"a b\", \"b c\") = {half}, F1 oracle err {oracle_err:.1e}"),
    )
}

/// Runs `evaluate_tags` on a zeroed 12-label model. Every tag scores the same,
/// ties rank by id, and so gold tag `r - 1` lands at rank `r`.
pub fn tag_fixture() -> (f64, f64, f64) {
    let mut config = tiny_config(HeadKind::TagPredict, 0);
    config.num_labels = 12;
    let mut model = Model::new(config.clone()).unwrap();
    for id in model.params.ids().collect::<Vec<_>>() {
        model.params.get_mut(id).data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let data: Vec<Example> = TAG_FIXTURE_RANKS
        .iter()
        .map(|&r| Example {
            answer: Answer::Tag(r - 1),
            ..random_example(&config, &mut rng)
        })
        .collect();
    let m = evaluate_tags(&model, &data, 10, Execution::Sequential).unwrap();
    (m.precision_at_1, m.recall_at_k, m.mean_rank)
}

pub fn determinism() -> Outcome {
    let files = synth::cloze_morph(&SynthConfig::new(60, 20, 5)).unwrap();
    let data = Dataset::from_files(&files).unwrap();
    let mut config = data.model_config();
    config.hidden_dim = 8;
    config.embed_dim = 8;
    config.char_dim = 8;
    config.dropout = 0.2;
    config.seed = 17;
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 17,
        ..TrainConfig::default()
    };
    let run = |exec| {
        let mut model = Model::new(config.clone()).unwrap();
        let h = train(&mut model, &data.train, &data.dev, &tc, exec, |_| {}).unwrap();
        (model, h)
    };
    let (model, h1) = run(Execution::Sequential);
    let (_, h2) = run(Execution::Sequential);
    let (_, h3) = run(Execution::Parallel);
    let bits = |h: &finegate::harness::TrainHistory| h.losses().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let identical = bits(&h1) == bits(&h2) && bits(&h1) == bits(&h3);

    let before = evaluate(&model, &data.dev, Execution::Sequential).unwrap();
    let bytes = checkpoint::to_bytes(&model, &data.encoder).unwrap();
    let (loaded, encoder) = checkpoint::from_bytes(&bytes).unwrap();
    let reencoded = encoder.examples(&files.dev).unwrap();
    let after = evaluate(&loaded, &reencoded, Execution::Sequential).unwrap();
    Outcome::new(
        identical && before == after,
        format!(
            "loss curves bit-identical across runs and execution modes: {identical}; \
             dev metrics before/after reload {:.4}/{:.4}",
            before.primary(),
            after.primary()
        ),
    )
}

/// Share of training queries about an irregular noun in the cloze comparison.
pub const CLOZE_IRREGULAR_RATE: f64 = 0.45;
pub const CLOZE_SEEDS: [u64; 3] = [0, 1, 2];
const CLOZE_BUDGET_SECS: f64 = 15.0 * 60.0;

/// The gated reader and the two baselines it is compared against.
const CLOZE_MODELS: [(&str, CombinerKind, Interaction); 3] = [
    ("fine-gate", CombinerKind::FineGrainedGate, Interaction::FineGrained),
    ("concat", CombinerKind::Concat, Interaction::GatedAttention),
    ("word-only", CombinerKind::WordOnly, Interaction::GatedAttention),
];

/// Trained cloze models with the data they saw. `fine_gate` holds the
/// fine-gate model of the first seed.
pub struct ClozeStudy {
    pub outcome: Outcome,
    pub files: DatasetFiles,
    pub data: Dataset,
    pub fine_gate: Model,
}

pub fn cloze_config(data: &Dataset, combiner: CombinerKind, interaction: Interaction, seed: u64) -> ModelConfig {
    let mut config = data.model_config();
    config.combiner = combiner;
    config.interaction = interaction;
    config.train_word_embeddings = false;
    config.embed_init = 1.0;
    config.seed = seed;
    config
}

pub fn cloze_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerConfig::default().with_lr(2e-3),
        batch_size: 16,
        epochs: 30,
        seed,
        patience: Some(6),
        ..TrainConfig::default()
    }
}

pub fn cloze_learnability() -> ClozeStudy {
    let start = Instant::now();
    let synth_config = SynthConfig {
        irregular_rate: CLOZE_IRREGULAR_RATE,
        ..SynthConfig::new(2000, 500, 11)
    };
    let files = synth::cloze_morph(&synth_config).unwrap();
    let data = Dataset::from_files(&files).unwrap();
    let mut means = Vec::new();
    let mut fine_gate = None;
    for (name, combiner, interaction) in CLOZE_MODELS {
        let mut scores = Vec::new();
        for seed in CLOZE_SEEDS {
            let mut model = Model::new(cloze_config(&data, combiner, interaction, seed)).unwrap();
            let h = train(&mut model, &data.train, &data.dev, &cloze_train_config(seed), Execution::Sequential, |_| {})
                .unwrap();
            scores.push(h.best_dev_metric);
            if combiner == CombinerKind::FineGrainedGate && fine_gate.is_none() {
                fine_gate = Some(model);
            }
        }
        means.push((name, scores.iter().sum::<f64>() / scores.len() as f64, scores));
    }
    let secs = start.elapsed().as_secs_f64();
    let (fg, concat, word) = (means[0].1, means[1].1, means[2].1);
    let passed = fg >= 0.90 && fg >= word + 0.10 && fg >= concat && secs < CLOZE_BUDGET_SECS;
    let summary: Vec<String> = means
        .iter()
        .map(|(name, mean, s)| format!("{name} {mean:.3} ({})", s.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")))
        .collect();
    ClozeStudy {
        outcome: Outcome::new(passed, format!("mean dev accuracy {} in {secs:.0} s", summary.join(", "))),
        files,
        data,
        fine_gate: fine_gate.unwrap(),
    }
}

pub fn tag_learnability() -> Outcome {
    let expected = TAG_FIXTURE_EXPECTED;
    let fixture = tag_fixture();
    let files = synth::tag_pred(&SynthConfig::new(800, 200, 11)).unwrap();
    let data = Dataset::from_files(&files).unwrap();
    let mut model = Model::new(data.model_config()).unwrap();
    let tc = TrainConfig {
        optimizer: OptimizerConfig::default().with_lr(2e-3),
        batch_size: 16,
        epochs: 8,
        ..TrainConfig::default()
    };
    let h = train(&mut model, &data.train, &data.dev, &tc, Execution::Sequential, |_| {}).unwrap();
    let majority = majority_precision_at_1(&data.dev);
    Outcome::new(
        fixture == expected && h.best_dev_metric > majority,
        format!(
            "fixture (P@1, R@10, mean rank) = {fixture:?} vs hand {expected:?}; \
             trained P@1 {:.3} vs majority {majority:.3}",
            h.best_dev_metric
        ),
    )
}

/// Tokens carrying an entity tag in the training records: the generated
/// regular lemmas and their plurals.
fn planted_tokens(files: &DatasetFiles) -> HashSet<String> {
    files
        .train
        .iter()
        .flat_map(|ex| ex.document.iter().chain(&ex.query))
        .filter(|t| synth::ENTITY_NER.contains(&t.ner.as_str()))
        .map(|t| t.surface.clone())
        .collect()
}

pub fn gate_directionality(study: &ClozeStudy) -> Outcome {
    let report = gate_report(
        &study.fine_gate,
        &study.data.train,
        &study.data.encoder.vocabs.words,
        Execution::Sequential,
    )
    .unwrap();
    let rarest = report.feature("DOCLEN-0").unwrap();
    let commonest = report.feature("DOCLEN-4").unwrap();
    let planted = planted_tokens(&study.files);
    let top = report.top(20);
    let hits = top.iter().filter(|t| planted.contains(&t.token)).count();
    let share = hits as f64 / top.len() as f64;
    Outcome::new(
        rarest > commonest && share >= 0.7,
        format!(
            "DOCLEN-0 weight {rarest:.4} vs DOCLEN-4 {commonest:.4}; \
             {hits}/{} highest-gate tokens are planted rare nouns",
            top.len()
        ),
    )
}

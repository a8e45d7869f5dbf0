#![allow(dead_code)]

pub mod criteria;
pub mod grad_suite;
pub mod oracles;

use finegate::features::{TagVocab, REQUIRED_NER};
use finegate::reader::{Answer, Example, HeadKind, ModelConfig};
use finegate::token_repr::Token;
use finegate::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn uniform_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn small_tags() -> TagVocab {
    TagVocab::new(
        REQUIRED_NER.iter().map(|s| s.to_string()).collect(),
        vec!["NN".into(), "VB".into()],
    )
    .unwrap()
}

pub fn random_token(vocab: usize, alphabet: usize, tags: &TagVocab, rng: &mut ChaCha8Rng) -> Token {
    Token {
        word_id: rng.gen_range(0..vocab),
        char_ids: (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..alphabet)).collect(),
        ner: rng.gen_range(0..tags.ner_slots()),
        pos: rng.gen_range(0..tags.pos_slots()),
        freq_bin: rng.gen_range(0..5),
    }
}

/// A tiny K=2 model config with every width small enough for exhaustive
/// finite differences.
pub fn tiny_config(head: HeadKind, seed: u64) -> ModelConfig {
    let mut c = ModelConfig::new(head, 6, 5, small_tags());
    c.layers = 2;
    c.hidden_dim = 3;
    c.embed_dim = 3;
    c.char_dim = 2;
    c.num_labels = 4;
    c.seed = seed;
    c
}

/// Random example matching `config.head`.
pub fn random_example(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Example {
    let m = rng.gen_range(2..=5);
    let document: Vec<Token> = (0..m)
        .map(|_| random_token(config.vocab_size, config.alphabet_size, &config.tags, rng))
        .collect();
    let (query, answer, candidates) = match config.head {
        HeadKind::Cloze => {
            let q = (0..rng.gen_range(1..=3))
                .map(|_| random_token(config.vocab_size, config.alphabet_size, &config.tags, rng))
                .collect();
            let w = document[rng.gen_range(0..m)].word_id;
            let mut cands: Vec<usize> = document.iter().map(|t| t.word_id).collect();
            cands.sort_unstable();
            cands.dedup();
            (q, Answer::Word(w), cands)
        }
        HeadKind::Span => {
            let q = (0..rng.gen_range(1..=3))
                .map(|_| random_token(config.vocab_size, config.alphabet_size, &config.tags, rng))
                .collect();
            let s = rng.gen_range(0..m);
            let e = rng.gen_range(s..m);
            (q, Answer::Span(s, e), Vec::new())
        }
        HeadKind::TagPredict => (Vec::new(), Answer::Tag(rng.gen_range(0..config.num_labels)), Vec::new()),
    };
    Example {
        document,
        query,
        answer,
        candidates,
    }
}

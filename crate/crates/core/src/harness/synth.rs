//! Deterministic synthetic corpora.
//!
//! - `cloze_morph`: documents list plural named entities (`lemma + "s"`); the
//!   query mentions one bare lemma and the answer is its plural. Dev lemmas
//!   never occur in training, so held-out answers can only be matched through
//!   spelling. A few frequent irregular nouns (`mouse`/`mice`) appear in
//!   training only, where spelling misleads and the word embedding must carry
//!   the match.
//! - `span_morph`: the same documents; the answer is the two-token span
//!   `adjective plural`.
//! - `tag_pred`: short filler sequences with one rare marker word whose suffix
//!   determines the tag. Tag frequencies are skewed.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::data::{DatasetFiles, RawAnswer, RawExample, RawToken, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SynthTask {
    ClozeMorph,
    SpanMorph,
    TagPred,
}

impl SynthTask {
    pub fn name(self) -> &'static str {
        match self {
            SynthTask::ClozeMorph => "cloze_morph",
            SynthTask::SpanMorph => "span_morph",
            SynthTask::TagPred => "tag_pred",
        }
    }

    pub fn task(self) -> Task {
        match self {
            SynthTask::ClozeMorph => Task::Cloze,
            SynthTask::SpanMorph => Task::Span,
            SynthTask::TagPred => Task::Tags,
        }
    }
}

impl std::str::FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SynthTask::ClozeMorph, SynthTask::SpanMorph, SynthTask::TagPred]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown synthetic task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub train: usize,
    pub dev: usize,
    pub seed: u64,
    /// Distinct regular lemmas in the training split.
    pub train_lemmas: usize,
    /// Distinct regular lemmas in the dev split.
    pub dev_lemmas: usize,
    /// Candidates per cloze document.
    pub candidates: usize,
    /// Share of training queries about an irregular noun.
    pub irregular_rate: f64,
}

impl SynthConfig {
    pub fn new(train: usize, dev: usize, seed: u64) -> Self {
        SynthConfig {
            train,
            dev,
            seed,
            train_lemmas: 1500,
            dev_lemmas: 400,
            candidates: 4,
            irregular_rate: 0.15,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.train == 0 || self.dev == 0 {
            return Err(Error::contract("synthetic splits need at least one example"));
        }
        if self.candidates < 2 || self.train_lemmas < self.candidates || self.dev_lemmas < self.candidates {
            return Err(Error::contract("need at least as many lemmas as candidates, and two candidates"));
        }
        if !(0.0..=1.0).contains(&self.irregular_rate) {
            return Err(Error::contract("irregular_rate outside [0, 1]"));
        }
        Ok(())
    }
}

pub const ENTITY_NER: [&str; 3] = ["Person", "Organization", "Location"];

pub const IRREGULAR: [(&str, &str); 10] = [
    ("man", "men"),
    ("woman", "women"),
    ("mouse", "mice"),
    ("goose", "geese"),
    ("child", "children"),
    ("foot", "feet"),
    ("tooth", "teeth"),
    ("person", "people"),
    ("ox", "oxen"),
    ("louse", "lice"),
];

const DETERMINERS: [&str; 3] = ["the", "some", "those"];
const ADJECTIVES: [&str; 8] = ["big", "old", "red", "quiet", "young", "tall", "brave", "odd"];
const VERBS: [&str; 8] = ["left", "met", "saw", "won", "slept", "ran", "sang", "fell"];
const QUESTION: [&str; 3] = ["where", "when", "why"];

const CONSONANTS: &[u8] = b"bdfgklmnprtvz";
const VOWELS: &[u8] = b"aeiou";

fn tok(surface: &str, ner: &str, pos: &str) -> RawToken {
    RawToken::new(surface, ner, pos)
}

fn syllable(rng: &mut ChaCha8Rng, out: &mut String) {
    out.push(*CONSONANTS.choose(rng).unwrap() as char);
    out.push(*VOWELS.choose(rng).unwrap() as char);
    if rng.gen_bool(0.5) {
        out.push(*CONSONANTS.choose(rng).unwrap() as char);
    }
}

/// `n` distinct pronounceable stems of 2–3 syllables not in `exclude`.
fn stems(rng: &mut ChaCha8Rng, n: usize, exclude: &HashSet<String>) -> Vec<String> {
    let reserved: HashSet<&str> = IRREGULAR
        .iter()
        .flat_map(|(a, b)| [*a, *b])
        .chain(DETERMINERS)
        .chain(ADJECTIVES)
        .chain(VERBS)
        .chain(QUESTION)
        .collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut s = String::new();
        for _ in 0..rng.gen_range(2..=3) {
            syllable(rng, &mut s);
        }
        let plural = format!("{s}s");
        if exclude.contains(&s) || exclude.contains(&plural) || reserved.contains(s.as_str()) {
            continue;
        }
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

#[derive(Clone, Debug)]
struct Noun {
    lemma: String,
    plural: String,
    ner: &'static str,
    lemma_pos: &'static str,
    plural_pos: &'static str,
}

fn regular(lemma: String, rng: &mut ChaCha8Rng) -> Noun {
    Noun {
        plural: format!("{lemma}s"),
        lemma,
        ner: ENTITY_NER.choose(rng).unwrap(),
        lemma_pos: "NNP",
        plural_pos: "NNPS",
    }
}

fn irregulars() -> Vec<Noun> {
    IRREGULAR
        .iter()
        .map(|(l, p)| Noun {
            lemma: l.to_string(),
            plural: p.to_string(),
            ner: "O",
            lemma_pos: "NN",
            plural_pos: "NNS",
        })
        .collect()
}

struct MorphExample {
    raw: RawExample,
    /// Start of the answer's `adjective plural` pair.
    span_start: usize,
}

fn morph_example(rng: &mut ChaCha8Rng, answer: &Noun, pool: &[Noun], n_candidates: usize) -> MorphExample {
    let mut nouns = vec![answer];
    while nouns.len() < n_candidates {
        let n = pool.choose(rng).unwrap();
        if nouns.iter().all(|m| m.plural != n.plural) {
            nouns.push(n);
        }
    }
    nouns.shuffle(rng);
    let mut document = Vec::new();
    let mut span_start = 0;
    for n in &nouns {
        if n.plural == answer.plural {
            span_start = document.len() + 1;
        }
        document.push(tok(DETERMINERS.choose(rng).unwrap(), "O", "DT"));
        document.push(tok(ADJECTIVES.choose(rng).unwrap(), "O", "JJ"));
        document.push(tok(&n.plural, n.ner, n.plural_pos));
        document.push(tok(VERBS.choose(rng).unwrap(), "O", "VBD"));
    }
    let query = vec![
        tok(QUESTION.choose(rng).unwrap(), "O", "WRB"),
        tok(DETERMINERS.choose(rng).unwrap(), "O", "DT"),
        tok(&answer.lemma, answer.ner, answer.lemma_pos),
        tok(VERBS.choose(rng).unwrap(), "O", "VBD"),
    ];
    MorphExample {
        raw: RawExample {
            document,
            query,
            answer: RawAnswer::Word(answer.plural.clone()),
            candidates: nouns.iter().map(|n| n.plural.clone()).collect(),
        },
        span_start,
    }
}

fn morph_splits(cfg: &SynthConfig) -> Result<(Vec<MorphExample>, Vec<MorphExample>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train_stems = stems(&mut rng, cfg.train_lemmas, &HashSet::new());
    let taken: HashSet<String> = train_stems.iter().flat_map(|s| [s.clone(), format!("{s}s")]).collect();
    let dev_stems = stems(&mut rng, cfg.dev_lemmas, &taken);
    let train_pool: Vec<Noun> = train_stems.into_iter().map(|s| regular(s, &mut rng)).collect();
    let dev_pool: Vec<Noun> = dev_stems.into_iter().map(|s| regular(s, &mut rng)).collect();
    let irregular = irregulars();

    let train = (0..cfg.train)
        .map(|_| {
            let answer = if rng.gen_bool(cfg.irregular_rate) {
                irregular.choose(&mut rng).unwrap()
            } else {
                train_pool.choose(&mut rng).unwrap()
            };
            morph_example(&mut rng, answer, &train_pool, cfg.candidates)
        })
        .collect();
    let dev = (0..cfg.dev)
        .map(|_| {
            let answer = dev_pool.choose(&mut rng).unwrap();
            morph_example(&mut rng, answer, &dev_pool, cfg.candidates)
        })
        .collect();
    Ok((train, dev))
}

pub fn cloze_morph(cfg: &SynthConfig) -> Result<DatasetFiles> {
    let (train, dev) = morph_splits(cfg)?;
    DatasetFiles::new(
        Task::Cloze,
        train.into_iter().map(|m| m.raw).collect(),
        dev.into_iter().map(|m| m.raw).collect(),
    )
}

pub fn span_morph(cfg: &SynthConfig) -> Result<DatasetFiles> {
    let (train, dev) = morph_splits(cfg)?;
    let to_span = |m: MorphExample| RawExample {
        answer: RawAnswer::Span([m.span_start, m.span_start + 1]),
        candidates: Vec::new(),
        ..m.raw
    };
    DatasetFiles::new(
        Task::Span,
        train.into_iter().map(to_span).collect(),
        dev.into_iter().map(to_span).collect(),
    )
}

/// Marker suffixes and their tags, most frequent first.
pub const SUFFIX_TAGS: [(&str, &str); 10] = [
    ("ing", "#doing"),
    ("ness", "#state"),
    ("ful", "#full"),
    ("less", "#without"),
    ("ist", "#agent"),
    ("ism", "#belief"),
    ("ous", "#quality"),
    ("ize", "#make"),
    ("ly", "#manner"),
    ("dom", "#realm"),
];

const TAG_FILLER: [(&str, &str); 12] = [
    ("the", "DT"),
    ("a", "DT"),
    ("of", "IN"),
    ("in", "IN"),
    ("and", "CC"),
    ("so", "RB"),
    ("very", "RB"),
    ("today", "NN"),
    ("people", "NNS"),
    ("said", "VBD"),
    ("new", "JJ"),
    ("good", "JJ"),
];

fn tag_example(rng: &mut ChaCha8Rng, stem: &str, weights: &[f64]) -> RawExample {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    let mut k = 0;
    while k + 1 < weights.len() && x >= weights[k] {
        x -= weights[k];
        k += 1;
    }
    let (suffix, tag) = SUFFIX_TAGS[k];
    let len = rng.gen_range(4..=7);
    let marker_at = rng.gen_range(0..len);
    let document = (0..len)
        .map(|i| {
            if i == marker_at {
                tok(&format!("{stem}{suffix}"), "O", "NN")
            } else {
                let (w, p) = TAG_FILLER.choose(rng).unwrap();
                tok(w, "O", p)
            }
        })
        .collect();
    RawExample {
        document,
        query: Vec::new(),
        answer: RawAnswer::Tag(tag.to_string()),
        candidates: Vec::new(),
    }
}

pub fn tag_pred(cfg: &SynthConfig) -> Result<DatasetFiles> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Zipf-like tag frequencies
    let weights: Vec<f64> = (0..SUFFIX_TAGS.len()).map(|k| 1.0 / (k as f64 + 1.0)).collect();
    let all = stems(&mut rng, cfg.train + cfg.dev, &HashSet::new());
    let (train_stems, dev_stems) = all.split_at(cfg.train);
    let train = train_stems.iter().map(|s| tag_example(&mut rng, s, &weights)).collect();
    let dev = dev_stems.iter().map(|s| tag_example(&mut rng, s, &weights)).collect();
    DatasetFiles::new(Task::Tags, train, dev)
}

pub fn generate(task: SynthTask, cfg: &SynthConfig) -> Result<DatasetFiles> {
    match task {
        SynthTask::ClozeMorph => cloze_morph(cfg),
        SynthTask::SpanMorph => span_morph(cfg),
        SynthTask::TagPred => tag_pred(cfg),
    }
}

/// Checks the generator contracts: every record is well formed, every cloze
/// answer occurs in its document, and no dev answer or query entity occurs
/// anywhere in training.
pub fn validate(files: &DatasetFiles) -> Result<()> {
    for (split, rows) in [("train", &files.train), ("dev", &files.dev)] {
        for (i, ex) in rows.iter().enumerate() {
            ex.check(files.task)
                .map_err(|m| Error::contract(format!("{split} record {}: {m}", i + 1)))?;
        }
    }
    let train_words: HashSet<&str> = files
        .train
        .iter()
        .flat_map(|ex| ex.document.iter().chain(&ex.query))
        .map(|t| t.surface.as_str())
        .collect();
    for (i, ex) in files.dev.iter().enumerate() {
        let mut held_out: Vec<&str> = ex
            .query
            .iter()
            .filter(|t| t.ner != "O")
            .map(|t| t.surface.as_str())
            .collect();
        if let RawAnswer::Word(w) = &ex.answer {
            held_out.push(w);
        }
        if let Some(w) = held_out.iter().find(|w| train_words.contains(*w)) {
            return Err(Error::contract(format!("dev record {}: {w:?} also occurs in training", i + 1)));
        }
    }
    Ok(())
}

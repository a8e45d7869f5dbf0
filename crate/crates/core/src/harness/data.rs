//! Dataset directories: JSONL records plus vocabulary sidecar files.
//!
//! ```text
//! <dir>/meta.json     {"task": "cloze" | "span" | "tags", "format_version": 1}
//! <dir>/train.jsonl   one record per line
//! <dir>/dev.jsonl
//! <dir>/words.txt     one entry per line; line order is the id
//! <dir>/chars.txt
//! <dir>/ner.txt
//! <dir>/pos.txt
//! <dir>/tags.txt      output labels (tag task only; may be empty otherwise)
//! ```
//!
//! A record is `{"document": [...], "query": [...], "answer": ..., "candidates": [...]}`
//! with each token written `surface|ner|pos`. The answer is one of
//! `{"word": "..."}`, `{"span": [start, end]}` or `{"tag": "..."}`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FrequencyBinner, TagVocab};
use crate::reader::{Answer, Example, HeadKind, ModelConfig};
use crate::token_repr::{Token, UNK_WORD};

pub const FORMAT_VERSION: u32 = 1;
pub const UNK: &str = "<unk>";
/// Character id of characters outside the alphabet.
pub const UNK_CHAR: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Cloze,
    Span,
    Tags,
}

impl Task {
    pub fn head(self) -> HeadKind {
        match self {
            Task::Cloze => HeadKind::Cloze,
            Task::Span => HeadKind::Span,
            Task::Tags => HeadKind::TagPredict,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Cloze => "cloze",
            Task::Span => "span",
            Task::Tags => "tags",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Task::Cloze, Task::Span, Task::Tags]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub task: Task,
    pub format_version: u32,
}

/// Ordered string table.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(items: Vec<String>) -> Self {
        let index = items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocab { items, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.items
    }
}

impl Vocab {
    pub fn new(items: Vec<String>) -> Result<Self> {
        let v = Vocab::from(items);
        if v.index.len() != v.items.len() {
            return Err(Error::contract("vocabulary entries must be unique"));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, s: &str) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn item(&self, id: usize) -> &str {
        &self.items[id]
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let items: Vec<String> = text.lines().map(str::to_owned).collect();
        Vocab::new(items).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for item in &self.items {
            writeln!(w, "{item}")?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawToken {
    pub surface: String,
    pub ner: String,
    pub pos: String,
}

impl RawToken {
    pub fn new(surface: impl Into<String>, ner: impl Into<String>, pos: impl Into<String>) -> Self {
        RawToken {
            surface: surface.into(),
            ner: ner.into(),
            pos: pos.into(),
        }
    }

    /// Parses `surface|ner|pos`; the surface itself may contain `|`.
    pub fn parse(s: &str) -> Option<Self> {
        let mut parts = s.rsplitn(3, '|');
        let pos = parts.next()?;
        let ner = parts.next()?;
        let surface = parts.next()?;
        if surface.is_empty() {
            return None;
        }
        Some(RawToken::new(surface, ner, pos))
    }
}

impl fmt::Display for RawToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}|{}", self.surface, self.ner, self.pos)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawAnswer {
    Word(String),
    Span([usize; 2]),
    Tag(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawExample {
    pub document: Vec<RawToken>,
    pub query: Vec<RawToken>,
    pub answer: RawAnswer,
    pub candidates: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    document: Vec<String>,
    #[serde(default)]
    query: Vec<String>,
    answer: RawAnswer,
    #[serde(default)]
    candidates: Vec<String>,
}

impl RawExample {
    fn to_record(&self) -> Record {
        Record {
            document: self.document.iter().map(ToString::to_string).collect(),
            query: self.query.iter().map(ToString::to_string).collect(),
            answer: self.answer.clone(),
            candidates: self.candidates.clone(),
        }
    }

    fn from_record(r: Record) -> std::result::Result<Self, String> {
        let parse = |toks: Vec<String>| -> std::result::Result<Vec<RawToken>, String> {
            toks.iter()
                .map(|t| RawToken::parse(t).ok_or_else(|| format!("malformed token {t:?}")))
                .collect()
        };
        Ok(RawExample {
            document: parse(r.document)?,
            query: parse(r.query)?,
            answer: r.answer,
            candidates: r.candidates,
        })
    }

    /// Answer, candidates and span bounds are consistent with the document.
    pub fn check(&self, task: Task) -> std::result::Result<(), String> {
        if self.document.is_empty() {
            return Err("empty document".into());
        }
        let in_doc = |w: &str| self.document.iter().any(|t| t.surface == w);
        match (&self.answer, task) {
            (RawAnswer::Word(w), Task::Cloze) => {
                if self.query.is_empty() {
                    return Err("empty query".into());
                }
                if !in_doc(w) {
                    return Err(format!("answer {w:?} not in document"));
                }
                if !self.candidates.contains(w) {
                    return Err(format!("answer {w:?} not among candidates"));
                }
                if let Some(c) = self.candidates.iter().find(|c| !in_doc(c)) {
                    return Err(format!("candidate {c:?} not in document"));
                }
            }
            (RawAnswer::Span([s, e]), Task::Span) => {
                if self.query.is_empty() {
                    return Err("empty query".into());
                }
                if s > e || *e >= self.document.len() {
                    return Err(format!("span [{s}, {e}] invalid for {} tokens", self.document.len()));
                }
            }
            (RawAnswer::Tag(_), Task::Tags) => {
                if !self.query.is_empty() {
                    return Err("tag records take no query".into());
                }
            }
            (a, t) => return Err(format!("answer {a:?} does not fit task {t}")),
        }
        Ok(())
    }
}

pub fn write_jsonl(path: &Path, examples: &[RawExample]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, &ex.to_record())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path, task: Task) -> Result<Vec<RawExample>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            msg,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let ex = RawExample::from_record(record).map_err(err)?;
        ex.check(task).map_err(err)?;
        out.push(ex);
    }
    Ok(out)
}

/// Every string table a model needs to turn raw tokens into ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub words: Vocab,
    pub chars: Vocab,
    pub tags: TagVocab,
    pub labels: Vocab,
}

impl Vocabularies {
    /// Builds tables covering `examples`. Word id 0 is `<unk>` and char id 0
    /// the unknown character; NER tags always include the required core set.
    pub fn build<'a>(examples: impl IntoIterator<Item = &'a RawExample>) -> Result<Self> {
        let mut words = vec![UNK.to_string()];
        let mut chars = vec![UNK.to_string()];
        let mut ner: Vec<String> = crate::features::REQUIRED_NER.iter().map(|s| s.to_string()).collect();
        let mut pos = Vec::new();
        let mut labels = Vec::new();
        let (mut seen_w, mut seen_c) = (HashSet::new(), HashSet::new());
        let push = |list: &mut Vec<String>, s: &str| {
            if !list.iter().any(|x| x == s) {
                list.push(s.to_owned());
            }
        };
        for ex in examples {
            for t in ex.document.iter().chain(&ex.query) {
                if seen_w.insert(t.surface.clone()) {
                    words.push(t.surface.clone());
                }
                for c in t.surface.chars() {
                    if seen_c.insert(c) {
                        chars.push(c.to_string());
                    }
                }
                push(&mut ner, &t.ner);
                push(&mut pos, &t.pos);
            }
            if let RawAnswer::Tag(tag) = &ex.answer {
                push(&mut labels, tag);
            }
        }
        Ok(Vocabularies {
            words: Vocab::new(words)?,
            chars: Vocab::new(chars)?,
            tags: TagVocab::new(ner, pos)?,
            labels: Vocab::new(labels)?,
        })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let lines = |name: &str| -> Result<Vec<String>> {
            Ok(Vocab::read(&dir.join(name))?.items().to_vec())
        };
        Ok(Vocabularies {
            words: Vocab::read(&dir.join("words.txt"))?,
            chars: Vocab::read(&dir.join("chars.txt"))?,
            tags: TagVocab::new(lines("ner.txt")?, lines("pos.txt")?)?,
            labels: Vocab::read(&dir.join("tags.txt"))?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.words.write(&dir.join("words.txt"))?;
        self.chars.write(&dir.join("chars.txt"))?;
        Vocab::from(self.tags.ner_tags().to_vec()).write(&dir.join("ner.txt"))?;
        Vocab::from(self.tags.pos_tags().to_vec()).write(&dir.join("pos.txt"))?;
        self.labels.write(&dir.join("tags.txt"))
    }
}

/// Number of examples whose document or query contains each word.
pub fn document_frequencies<'a>(examples: impl IntoIterator<Item = &'a RawExample>) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for ex in examples {
        let unique: HashSet<&str> = ex.document.iter().chain(&ex.query).map(|t| t.surface.as_str()).collect();
        for w in unique {
            *counts.entry(w.to_owned()).or_insert(0) += 1;
        }
    }
    counts
}

/// Converts raw records to model inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub vocabs: Vocabularies,
    pub doc_freq: BTreeMap<String, u64>,
    pub binner: FrequencyBinner,
}

impl Encoder {
    /// Fits the frequency binner on the training documents.
    pub fn fit(vocabs: Vocabularies, train: &[RawExample]) -> Result<Self> {
        let doc_freq = document_frequencies(train);
        let binner = FrequencyBinner::fit(&doc_freq)?;
        Ok(Encoder {
            vocabs,
            doc_freq,
            binner,
        })
    }

    pub fn freq_bin(&self, surface: &str) -> usize {
        self.binner.bin(self.doc_freq.get(surface).copied().unwrap_or(0))
    }

    pub fn token(&self, t: &RawToken) -> Token {
        let mut char_ids: Vec<usize> = t
            .surface
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.vocabs.chars.get(c.encode_utf8(&mut buf)).unwrap_or(UNK_CHAR)
            })
            .collect();
        if char_ids.is_empty() {
            char_ids.push(UNK_CHAR);
        }
        Token {
            word_id: self.vocabs.words.get(&t.surface).unwrap_or(UNK_WORD),
            char_ids,
            ner: self.vocabs.tags.ner_index(&t.ner),
            pos: self.vocabs.tags.pos_index(&t.pos),
            freq_bin: self.freq_bin(&t.surface),
        }
    }

    pub fn example(&self, raw: &RawExample) -> Result<Example> {
        let document: Vec<Token> = raw.document.iter().map(|t| self.token(t)).collect();
        let query = raw.query.iter().map(|t| self.token(t)).collect();
        let word = |w: &str| self.vocabs.words.get(w).unwrap_or(UNK_WORD);
        let answer = match &raw.answer {
            RawAnswer::Word(w) => Answer::Word(word(w)),
            RawAnswer::Span([s, e]) => Answer::Span(*s, *e),
            RawAnswer::Tag(t) => Answer::Tag(
                self.vocabs
                    .labels
                    .get(t)
                    .ok_or_else(|| Error::contract(format!("unknown tag {t:?}")))?,
            ),
        };
        Ok(Example {
            document,
            query,
            answer,
            candidates: raw.candidates.iter().map(|c| word(c)).collect(),
        })
    }

    pub fn examples(&self, raw: &[RawExample]) -> Result<Vec<Example>> {
        raw.iter().map(|r| self.example(r)).collect()
    }
}

/// A dataset directory in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFiles {
    pub task: Task,
    pub train: Vec<RawExample>,
    pub dev: Vec<RawExample>,
    pub vocabs: Vocabularies,
}

impl DatasetFiles {
    /// Builds vocabularies over both splits.
    pub fn new(task: Task, train: Vec<RawExample>, dev: Vec<RawExample>) -> Result<Self> {
        for (split, rows) in [("train", &train), ("dev", &dev)] {
            for (i, ex) in rows.iter().enumerate() {
                ex.check(task)
                    .map_err(|m| Error::contract(format!("{split} record {}: {m}", i + 1)))?;
            }
        }
        let vocabs = Vocabularies::build(train.iter().chain(&dev))?;
        Ok(DatasetFiles {
            task,
            train,
            dev,
            vocabs,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = Meta {
            task: self.task,
            format_version: FORMAT_VERSION,
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("dev.jsonl"), &self.dev)?;
        self.vocabs.write(dir)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: Meta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Parse {
                path: meta_path,
                line: 0,
                msg: format!("unsupported format version {}", meta.format_version),
            });
        }
        Ok(DatasetFiles {
            task: meta.task,
            train: read_jsonl(&dir.join("train.jsonl"), meta.task)?,
            dev: read_jsonl(&dir.join("dev.jsonl"), meta.task)?,
            vocabs: Vocabularies::read(dir)?,
        })
    }

    pub fn split_path(dir: &Path, split: &str) -> PathBuf {
        dir.join(format!("{split}.jsonl"))
    }
}

/// Encoded train/dev splits ready for training.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub task: Task,
    pub encoder: Encoder,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

impl Dataset {
    pub fn from_files(files: &DatasetFiles) -> Result<Self> {
        let encoder = Encoder::fit(files.vocabs.clone(), &files.train)?;
        Ok(Dataset {
            task: files.task,
            train: encoder.examples(&files.train)?,
            dev: encoder.examples(&files.dev)?,
            encoder,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Dataset::from_files(&DatasetFiles::read(dir)?)
    }

    /// Default model config sized to this dataset's vocabularies.
    pub fn model_config(&self) -> ModelConfig {
        let v = &self.encoder.vocabs;
        let mut config = ModelConfig::new(self.task.head(), v.words.len(), v.chars.len(), v.tags.clone());
        config.num_labels = v.labels.len().max(1);
        config
    }
}

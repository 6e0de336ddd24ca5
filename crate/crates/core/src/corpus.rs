//! Corpus ingestion (SQuAD v1.1 JSON, MRQA JSON-lines), passage sampling and
//! synthetic dataset persistence.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::SyntheticExample;
use crate::tokenize::{sentence_bounds, tokenize, Token, TokenRange};

pub const DEFAULT_SAMPLE_SIZE: usize = 3000;
pub const SYNTHETIC_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
    pub tokens: Vec<Token>,
    pub sentence_bounds: Vec<TokenRange>,
}

impl Passage {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        let sentence_bounds = sentence_bounds(&text, &tokens);
        Self {
            id: id.into(),
            text,
            tokens,
            sentence_bounds,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Byte range of the inclusive token span.
    pub fn byte_range(&self, start: usize, end: usize) -> Result<(usize, usize)> {
        if start > end || end >= self.tokens.len() {
            return Err(Error::contract(format!(
                "span ({start}, {end}) invalid for passage {} with {} tokens",
                self.id,
                self.tokens.len()
            )));
        }
        Ok((self.tokens[start].char_start, self.tokens[end].char_end))
    }

    pub fn span_text(&self, start: usize, end: usize) -> Result<&str> {
        let (s, e) = self.byte_range(start, end)?;
        Ok(&self.text[s..e])
    }

    pub fn token_surfaces(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.surface.clone()).collect()
    }

    /// Smallest token span covering the byte range `[start, end)`.
    pub fn tokens_covering(&self, start: usize, end: usize) -> Option<TokenRange> {
        let first = self.tokens.iter().position(|t| t.char_end > start)?;
        let last = self.tokens.iter().rposition(|t| t.char_start < end)?;
        (first <= last).then_some((first, last))
    }

    /// Character (code point) offset of a byte offset, the unit SQuAD uses.
    pub fn char_index(&self, byte: usize) -> usize {
        self.text[..byte].chars().count()
    }

    pub fn byte_index(&self, char_idx: usize) -> Option<usize> {
        if char_idx == self.text.chars().count() {
            return Some(self.text.len());
        }
        self.text.char_indices().nth(char_idx).map(|(b, _)| b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldQA {
    pub id: String,
    pub passage_id: String,
    pub question: String,
    pub answer_text: String,
    /// Character (code point) offset into the passage text.
    pub answer_char_start: usize,
    /// Further accepted answers, used only for metric matching.
    #[serde(default)]
    pub aliases: Vec<String>,
}

impl GoldQA {
    pub fn gold_answers(&self) -> Vec<&str> {
        std::iter::once(self.answer_text.as_str())
            .chain(self.aliases.iter().map(String::as_str))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub passages: Vec<Passage>,
    pub qa_pairs: Vec<GoldQA>,
    pub source_name: String,
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus and checks that every gold answer sits at its stated
    /// offset inside an existing passage.
    pub fn new(passages: Vec<Passage>, qa_pairs: Vec<GoldQA>, source_name: impl Into<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if index.insert(p.id.clone(), i).is_some() {
                return Err(Error::CorruptRecord {
                    record_id: p.id.clone(),
                    message: "duplicate passage id".into(),
                });
            }
        }
        for qa in &qa_pairs {
            let p = index
                .get(&qa.passage_id)
                .map(|&i| &passages[i])
                .ok_or_else(|| Error::CorruptRecord {
                    record_id: qa.id.clone(),
                    message: format!("unknown passage {}", qa.passage_id),
                })?;
            check_answer_offset(p, qa)?;
        }
        Ok(Self {
            passages,
            qa_pairs,
            source_name: source_name.into(),
            index,
        })
    }

    pub fn passage(&self, id: &str) -> Option<&Passage> {
        self.index.get(id).map(|&i| &self.passages[i])
    }

    pub fn gold_for(&self, passage_ids: &HashSet<&str>) -> Vec<GoldQA> {
        self.qa_pairs
            .iter()
            .filter(|q| passage_ids.contains(q.passage_id.as_str()))
            .cloned()
            .collect()
    }
}

fn check_answer_offset(p: &Passage, qa: &GoldQA) -> Result<()> {
    let found: String = p
        .text
        .chars()
        .skip(qa.answer_char_start)
        .take(qa.answer_text.chars().count())
        .collect();
    if found != qa.answer_text {
        return Err(Error::CorruptRecord {
            record_id: qa.id.clone(),
            message: format!(
                "answer {:?} not found at offset {} (text there: {:?})",
                qa.answer_text, qa.answer_char_start, found
            ),
        });
    }
    Ok(())
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 2];
    let n = f.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(f))))
    } else {
        Ok(Box::new(BufReader::new(f)))
    }
}

fn format_err(path: &Path, location: impl Into<String>, message: impl ToString) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        location: location.into(),
        message: message.to_string(),
    }
}

#[derive(Deserialize)]
struct SquadFile {
    data: Vec<SquadArticle>,
}

#[derive(Deserialize)]
struct SquadArticle {
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQa>,
}

#[derive(Deserialize)]
struct SquadQa {
    id: String,
    question: String,
    answers: Vec<SquadAnswer>,
}

#[derive(Deserialize)]
struct SquadAnswer {
    text: String,
    answer_start: usize,
}

/// Load a SQuAD v1.1 file. Passage ids are `<article>-<paragraph>` indices.
pub fn load_squad(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let reader = open_maybe_gz(path)?;
    let mut de = serde_json::Deserializer::from_reader(reader);
    let file: SquadFile = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let loc = e.path().to_string();
        format_err(path, loc, e.into_inner())
    })?;
    let mut passages = Vec::new();
    let mut qas = Vec::new();
    for (a, art) in file.data.into_iter().enumerate() {
        for (pi, para) in art.paragraphs.into_iter().enumerate() {
            let pid = format!("{a}-{pi}");
            for qa in para.qas {
                let mut answers = qa.answers.into_iter();
                let Some(first) = answers.next() else {
                    return Err(Error::CorruptRecord {
                        record_id: qa.id,
                        message: "question has no answers".into(),
                    });
                };
                let mut aliases: Vec<String> = Vec::new();
                for alt in answers {
                    if alt.text != first.text && !aliases.contains(&alt.text) {
                        aliases.push(alt.text);
                    }
                }
                qas.push(GoldQA {
                    id: qa.id,
                    passage_id: pid.clone(),
                    question: qa.question,
                    answer_text: first.text,
                    answer_char_start: first.answer_start,
                    aliases,
                });
            }
            passages.push(Passage::new(pid, para.context));
        }
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "squad".into());
    Corpus::new(passages, qas, name)
}

#[derive(Deserialize)]
struct MrqaRecord {
    #[serde(default)]
    id: Option<String>,
    context: String,
    qas: Vec<MrqaQa>,
}

#[derive(Deserialize)]
struct MrqaQa {
    #[serde(alias = "id")]
    qid: String,
    question: String,
    #[serde(default)]
    answers: Vec<String>,
    detected_answers: Vec<MrqaDetected>,
}

#[derive(Deserialize)]
struct MrqaDetected {
    #[allow(dead_code)]
    text: String,
    /// Inclusive character spans.
    char_spans: Vec<(usize, usize)>,
}

/// Load an MRQA JSON-lines file (optionally gzipped). The first line is the
/// header. Each qa's first detected answer location supplies the gold span;
/// every listed alias is kept for metric matching.
pub fn load_mrqa(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let reader = open_maybe_gz(path)?;
    let mut lines = reader.lines().enumerate();
    let mut source = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mrqa".into());
    match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            let header: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| format_err(path, "line 1", e))?;
            if let Some(ds) = header.pointer("/header/dataset").and_then(|v| v.as_str()) {
                source = ds.to_string();
            }
        }
        None => return Err(format_err(path, "line 1", "missing header line")),
    }
    let mut passages = Vec::new();
    let mut qas = Vec::new();
    for (ln, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut de = serde_json::Deserializer::from_str(&line);
        let rec: MrqaRecord = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let loc = format!("line {}: {}", ln + 1, e.path());
            format_err(path, loc, e.into_inner())
        })?;
        let pid = rec.id.clone().unwrap_or_else(|| format!("line-{}", ln + 1));
        let passage = Passage::new(pid.clone(), rec.context);
        let n_chars = passage.text.chars().count();
        for qa in rec.qas {
            let span = qa
                .detected_answers
                .first()
                .and_then(|d| d.char_spans.first().copied())
                .ok_or_else(|| Error::CorruptRecord {
                    record_id: qa.qid.clone(),
                    message: "no detected answer span".into(),
                })?;
            if span.0 > span.1 || span.1 >= n_chars {
                return Err(Error::CorruptRecord {
                    record_id: qa.qid.clone(),
                    message: format!("char span {:?} outside context of {n_chars} chars", span),
                });
            }
            let answer_text: String = passage.text.chars().skip(span.0).take(span.1 - span.0 + 1).collect();
            let aliases = qa.answers.into_iter().filter(|a| *a != answer_text).collect();
            qas.push(GoldQA {
                id: qa.qid,
                passage_id: pid.clone(),
                question: qa.question,
                answer_text,
                answer_char_start: span.0,
                aliases,
            });
        }
        passages.push(passage);
    }
    Corpus::new(passages, qas, source)
}

/// Load by extension: `.jsonl` / `.jsonl.gz` are MRQA, anything else SQuAD.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let name = path.to_string_lossy();
    if name.ends_with(".jsonl") || name.ends_with(".jsonl.gz") {
        load_mrqa(path)
    } else {
        load_squad(path)
    }
}

/// Write a corpus as SQuAD v1.1, one article per passage. Passage ids are not
/// stored; reloading numbers them `<index>-0`.
pub fn write_squad(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut by_pid: HashMap<&str, Vec<serde_json::Value>> = HashMap::new();
    for qa in &corpus.qa_pairs {
        let p = corpus
            .passage(&qa.passage_id)
            .ok_or_else(|| Error::contract(format!("unknown passage {}", qa.passage_id)))?;
        let mut answers = vec![serde_json::json!({"text": qa.answer_text, "answer_start": qa.answer_char_start})];
        for alias in &qa.aliases {
            // aliases carry no offset of their own; point at the first occurrence
            if let Some(b) = p.text.find(alias.as_str()) {
                answers.push(serde_json::json!({"text": alias, "answer_start": p.char_index(b)}));
            }
        }
        by_pid.entry(qa.passage_id.as_str()).or_default().push(serde_json::json!({
            "id": qa.id,
            "question": qa.question,
            "answers": answers,
        }));
    }
    let data: Vec<serde_json::Value> = corpus
        .passages
        .iter()
        .map(|p| {
            serde_json::json!({
                "title": p.id,
                "paragraphs": [{"context": p.text, "qas": by_pid.remove(p.id.as_str()).unwrap_or_default()}],
            })
        })
        .collect();
    let body = serde_json::to_string(&serde_json::json!({"version": "1.1", "data": data})).expect("squad serializes");
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Uniform sample without replacement, returned in corpus order.
pub fn sample_passages(corpus: &Corpus, n: usize, seed: u64) -> Vec<Passage> {
    if n >= corpus.passages.len() {
        return corpus.passages.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, corpus.passages.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| corpus.passages[i].clone()).collect()
}

#[derive(Serialize, Deserialize)]
struct SyntheticHeader {
    schema_version: serde_json::Value,
    source: String,
}

pub fn write_synthetic(examples: &[SyntheticExample], source: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let header = SyntheticHeader {
        schema_version: SYNTHETIC_SCHEMA_VERSION.into(),
        source: source.to_string(),
    };
    let mut write_line = |v: String| -> Result<()> {
        w.write_all(v.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))
    };
    write_line(serde_json::to_string(&header).expect("header serializes"))?;
    for ex in examples {
        write_line(serde_json::to_string(&ex.to_record()).expect("record serializes"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Returns the examples and the header's `source` tag.
pub fn read_synthetic_with_source(path: impl AsRef<Path>) -> Result<(Vec<SyntheticExample>, String)> {
    let path = path.as_ref();
    let reader = open_maybe_gz(path)?;
    let mut lines = reader.lines().enumerate();
    let header_line = match lines.next() {
        Some((_, l)) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(format_err(path, "line 1", "missing header line")),
    };
    let header: SyntheticHeader =
        serde_json::from_str(&header_line).map_err(|e| format_err(path, "line 1", e))?;
    if header.schema_version.as_u64() != Some(SYNTHETIC_SCHEMA_VERSION as u64) {
        return Err(Error::SchemaVersion {
            path: path.to_path_buf(),
            expected: SYNTHETIC_SCHEMA_VERSION,
            found: header.schema_version.to_string(),
        });
    }
    let mut out = Vec::new();
    for (ln, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut de = serde_json::Deserializer::from_str(&line);
        let rec = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            format_err(path, format!("line {}: {}", ln + 1, e.path()), e.into_inner())
        })?;
        out.push(SyntheticExample::from_record(rec));
    }
    Ok((out, header.source))
}

pub fn read_synthetic(path: impl AsRef<Path>) -> Result<Vec<SyntheticExample>> {
    read_synthetic_with_source(path).map(|(v, _)| v)
}

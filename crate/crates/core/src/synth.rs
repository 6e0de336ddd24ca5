//! Per-passage synthesis: recognise answer entities, mask each one, generate
//! a question, and let the extractor re-locate (fine-grain) the answer.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{same_answer, ScoringBackend, MASK_TOKEN};
use crate::corpus::Passage;
use crate::error::{Error, Result};
use crate::qaecore::{decode_answer, qa_loss, LogitPair};
use crate::spanops::{score_spans_in_sentences, select_topk_nonoverlap, AerConfig, ScoredSpan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Simple,
    Challenging,
    Difficult,
}

impl Bucket {
    pub fn from_component(c: usize) -> Self {
        match c {
            0 => Bucket::Simple,
            1 => Bucket::Challenging,
            _ => Bucket::Difficult,
        }
    }

    pub fn is_selected(self) -> bool {
        self != Bucket::Difficult
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticExample {
    pub passage_id: String,
    pub question: String,
    pub answer: ScoredSpan,
    pub answer_text: String,
    pub qg_perplexity: f64,
    pub qae_loss: Option<f64>,
    pub bucket: Option<Bucket>,
}

/// One line of the synthetic JSONL file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub passage_id: String,
    pub question: String,
    pub answer_text: String,
    pub answer_token_start: usize,
    pub answer_token_end: usize,
    #[serde(default)]
    pub answer_score: f64,
    pub qg_perplexity: f64,
    pub qae_loss: Option<f64>,
    pub bucket: Option<Bucket>,
}

impl SyntheticExample {
    pub fn to_record(&self) -> SyntheticRecord {
        SyntheticRecord {
            passage_id: self.passage_id.clone(),
            question: self.question.clone(),
            answer_text: self.answer_text.clone(),
            answer_token_start: self.answer.start,
            answer_token_end: self.answer.end,
            answer_score: self.answer.score,
            qg_perplexity: self.qg_perplexity,
            qae_loss: self.qae_loss,
            bucket: self.bucket,
        }
    }

    pub fn from_record(r: SyntheticRecord) -> Self {
        Self {
            passage_id: r.passage_id,
            question: r.question,
            answer: ScoredSpan::new(r.answer_token_start, r.answer_token_end, r.answer_score),
            answer_text: r.answer_text,
            qg_perplexity: r.qg_perplexity,
            qae_loss: r.qae_loss,
            bucket: r.bucket,
        }
    }
}

/// Passage text with one entity replaced by [`MASK_TOKEN`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedPassage {
    pub text: String,
    pub entity_text: String,
    /// Byte offset of the mask token in `text`.
    pub mask_at: usize,
}

impl MaskedPassage {
    /// Put the entity back where the mask is.
    pub fn splice(&self) -> String {
        let mut s = String::with_capacity(self.text.len() + self.entity_text.len());
        s.push_str(&self.text[..self.mask_at]);
        s.push_str(&self.entity_text);
        s.push_str(&self.text[self.mask_at + MASK_TOKEN.len()..]);
        s
    }
}

pub fn mask_passage(passage: &Passage, span: &ScoredSpan) -> Result<MaskedPassage> {
    let (s, e) = passage.byte_range(span.start, span.end)?;
    let text = format!("{}{}{}", &passage.text[..s], MASK_TOKEN, &passage.text[e..]);
    Ok(MaskedPassage {
        text,
        entity_text: passage.text[s..e].to_string(),
        mask_at: s,
    })
}

/// Ask the generator for a question about the masked entity. Returns the
/// question and its perplexity.
pub fn generate_question<B: ScoringBackend + ?Sized>(
    backend: &B,
    masked: &MaskedPassage,
    passage_id: &str,
) -> Result<(String, f64)> {
    let g = backend
        .qg_generate(&masked.text, &masked.entity_text)
        .map_err(|e| e.with_passage(passage_id))?;
    if g.question.trim().is_empty() {
        return Err(Error::Generation {
            passage_id: passage_id.to_string(),
            message: format!("empty question for entity {:?}", masked.entity_text),
        });
    }
    if !(g.perplexity > 0.0 && g.perplexity.is_finite()) {
        return Err(Error::Generation {
            passage_id: passage_id.to_string(),
            message: format!("invalid perplexity {}", g.perplexity),
        });
    }
    Ok((g.question, g.perplexity))
}

/// Extractor logits for `(question, passage)` and the decoded best span.
pub fn finegrain_with_logits<B: ScoringBackend + ?Sized>(
    backend: &B,
    question: &str,
    passage: &Passage,
    l_span: usize,
) -> Result<(ScoredSpan, LogitPair)> {
    let logits = backend
        .qae_logits(question, &passage.token_surfaces())
        .map_err(|e| e.with_passage(&passage.id))?;
    if logits.len() != passage.len() {
        return Err(Error::Protocol(format!(
            "extractor returned {} logits for {} tokens",
            logits.len(),
            passage.len()
        )));
    }
    let span = decode_answer(&logits, l_span)?;
    Ok((span, logits))
}

pub fn finegrain_answer<B: ScoringBackend + ?Sized>(
    backend: &B,
    question: &str,
    passage: &Passage,
    l_span: usize,
) -> Result<ScoredSpan> {
    finegrain_with_logits(backend, question, passage, l_span).map(|(s, _)| s)
}

/// The `n_search` lowest-perplexity candidates, ascending; ties keep input order.
pub fn rank_aer_lm(candidates: &[SyntheticExample], n_search: usize) -> Vec<SyntheticExample> {
    let mut v = candidates.to_vec();
    v.sort_by(|a, b| a.qg_perplexity.total_cmp(&b.qg_perplexity));
    v.truncate(n_search);
    v
}

/// A synthesized example together with the entity that was masked for it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCandidate {
    pub example: SyntheticExample,
    pub entity: ScoredSpan,
    pub entity_text: String,
}

impl SynthCandidate {
    /// The extractor recovered the masked entity.
    pub fn answered_correctly(&self) -> bool {
        same_answer(&self.example.answer_text, &self.entity_text)
    }
}

/// Sort by `gamma * correct - perplexity`, descending; ties keep input order.
pub fn rank_aer_coop<F>(candidates: &[SynthCandidate], gamma: f64, is_correct: F) -> Vec<SynthCandidate>
where
    F: Fn(&SynthCandidate) -> bool,
{
    let mut scored: Vec<(f64, &SynthCandidate)> = candidates
        .iter()
        .map(|c| (gamma * is_correct(c) as u8 as f64 - c.example.qg_perplexity, c))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.into_iter().map(|(_, c)| c.clone()).collect()
}

/// How the per-passage candidate set is narrowed before selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AerStrategy {
    /// Keep every candidate; the mixture selector does the filtering.
    #[default]
    All,
    /// Lowest generation perplexity.
    Lm,
    /// Correctness bit first, then perplexity.
    Coop,
}

impl std::str::FromStr for AerStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" | "em" => Ok(AerStrategy::All),
            "lm" => Ok(AerStrategy::Lm),
            "coop" => Ok(AerStrategy::Coop),
            _ => Err(Error::contract(format!("unknown AER strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub aer: AerConfig,
    pub strategy: AerStrategy,
}

/// Top `n0` non-overlapping answer-entity spans, scored within sentences.
pub fn aer_candidates<B: ScoringBackend + ?Sized>(
    backend: &B,
    passage: &Passage,
    aer: &AerConfig,
) -> Result<Vec<ScoredSpan>> {
    let mut sentences = Vec::with_capacity(passage.sentence_bounds.len());
    for &(s, e) in &passage.sentence_bounds {
        let toks: Vec<String> = passage.tokens[s..=e].iter().map(|t| t.surface.clone()).collect();
        let l = backend.aer_logits(&toks).map_err(|err| err.with_passage(&passage.id))?;
        if l.len() != toks.len() {
            return Err(Error::Protocol(format!(
                "recognizer returned {} logits for {} tokens",
                l.len(),
                toks.len()
            )));
        }
        sentences.push(((s, e), l.start_logits, l.end_logits));
    }
    let spans = score_spans_in_sentences(&sentences, aer.l_span)?;
    Ok(select_topk_nonoverlap(&spans, aer.n0))
}

fn synthesize_one<B: ScoringBackend + ?Sized>(
    backend: &B,
    passage: &Passage,
    entity: &ScoredSpan,
    l_span: usize,
) -> Result<SynthCandidate> {
    let masked = mask_passage(passage, entity)?;
    let (question, ppl) = generate_question(backend, &masked, &passage.id)?;
    let (answer, logits) = finegrain_with_logits(backend, &question, passage, l_span)?;
    let loss = qa_loss(&logits, answer.range())?;
    Ok(SynthCandidate {
        example: SyntheticExample {
            passage_id: passage.id.clone(),
            question,
            answer_text: passage.span_text(answer.start, answer.end)?.to_string(),
            answer,
            qg_perplexity: ppl,
            qae_loss: Some(loss),
            bucket: None,
        },
        entity: *entity,
        entity_text: masked.entity_text,
    })
}

/// Every surviving candidate for a passage, in recognizer order, with
/// duplicate (question, answer) pairs removed. Candidate-level failures are
/// logged and dropped; only a recognizer failure fails the passage.
pub fn synthesize_candidates<B: ScoringBackend + ?Sized>(
    backend: &B,
    passage: &Passage,
    aer: &AerConfig,
) -> Result<(Vec<SynthCandidate>, usize)> {
    if passage.len() < 2 {
        return Ok((Vec::new(), 0));
    }
    let entities = aer_candidates(backend, passage, aer)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(entities.len());
    let mut dropped = 0;
    for ent in &entities {
        match synthesize_one(backend, passage, ent, aer.l_span) {
            Ok(c) => {
                let key = (c.example.question.clone(), c.example.answer.start, c.example.answer.end);
                if seen.insert(key) {
                    out.push(c);
                }
            }
            Err(e) => {
                log::warn!("dropping candidate ({}, {}) in passage {}: {e}", ent.start, ent.end, passage.id);
                dropped += 1;
            }
        }
    }
    Ok((out, dropped))
}

pub fn synthesize_passage<B: ScoringBackend + ?Sized>(
    backend: &B,
    passage: &Passage,
    config: &SynthConfig,
) -> Result<Vec<SyntheticExample>> {
    let (cands, _) = synthesize_candidates(backend, passage, &config.aer)?;
    Ok(apply_strategy(cands, config))
}

fn apply_strategy(cands: Vec<SynthCandidate>, config: &SynthConfig) -> Vec<SyntheticExample> {
    match config.strategy {
        AerStrategy::All => cands.into_iter().map(|c| c.example).collect(),
        AerStrategy::Lm => {
            let xs: Vec<SyntheticExample> = cands.into_iter().map(|c| c.example).collect();
            rank_aer_lm(&xs, config.aer.n_search)
        }
        AerStrategy::Coop => rank_aer_coop(&cands, config.aer.gamma, SynthCandidate::answered_correctly)
            .into_iter()
            .take(config.aer.n_search)
            .map(|c| c.example)
            .collect(),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthesisReport {
    pub examples: Vec<SyntheticExample>,
    pub failed_passages: Vec<String>,
    pub dropped_candidates: usize,
}

/// Synthesize over many passages in parallel (bounded by the current rayon
/// pool). Output order follows `passages` regardless of scheduling.
pub fn synthesize_corpus<B: ScoringBackend + ?Sized>(
    backend: &B,
    passages: &[Passage],
    config: &SynthConfig,
) -> SynthesisReport {
    let per: Vec<(String, Result<(Vec<SynthCandidate>, usize)>)> = passages
        .par_iter()
        .map(|p| (p.id.clone(), synthesize_candidates(backend, p, &config.aer)))
        .collect();
    let mut report = SynthesisReport::default();
    for (id, r) in per {
        match r {
            Ok((cands, dropped)) => {
                report.dropped_candidates += dropped;
                report.examples.extend(apply_strategy(cands, config));
            }
            Err(e) => {
                log::warn!("passage {id} failed: {e}");
                report.failed_passages.push(id);
            }
        }
    }
    report
}

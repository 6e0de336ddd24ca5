//! Candidate answer-entity spans: enumeration, additive start/end scoring,
//! overlap-free top-k selection and BIO tag decoding.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::TokenRange;

/// A token interval `[start, end]` (inclusive) with a real-valued score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSpan {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

impl ScoredSpan {
    pub fn new(start: usize, end: usize, score: f64) -> Self {
        Self { start, end, score }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn range(&self) -> TokenRange {
        (self.start, self.end)
    }

    pub fn overlaps(&self, other: &ScoredSpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn within(&self, bounds: TokenRange) -> bool {
        self.start >= bounds.0 && self.end <= bounds.1
    }
}

/// Score descending, then start ascending, then end ascending.
pub fn rank_order(a: &ScoredSpan, b: &ScoredSpan) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.cmp(&b.start))
        .then(a.end.cmp(&b.end))
}

/// Answer-entity recognition knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AerConfig {
    /// Maximum span length in tokens.
    pub l_span: usize,
    /// Preliminary candidate count per passage.
    pub n0: usize,
    /// Candidates kept by perplexity-based ranking.
    pub n_search: usize,
    /// Weight of the correctness bit in cooperative ranking.
    pub gamma: f64,
}

impl Default for AerConfig {
    fn default() -> Self {
        Self {
            l_span: 10,
            n0: 40,
            n_search: 5,
            gamma: 1000.0,
        }
    }
}

impl AerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_span < 1 {
            return Err(Error::contract("l_span must be >= 1"));
        }
        if self.n_search < 1 || self.n0 < self.n_search {
            return Err(Error::contract("require n0 >= n_search >= 1"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::contract("gamma must be > 0"));
        }
        Ok(())
    }
}

/// All `(i, j)` with `i <= j < length` and `j - i + 1 <= l_span`, lexicographic.
pub fn enumerate_spans(length: usize, l_span: usize) -> Vec<TokenRange> {
    let mut out = Vec::new();
    for i in 0..length {
        let last = (i + l_span).min(length);
        for j in i..last {
            out.push((i, j));
        }
    }
    out
}

pub fn score_spans(start_scores: &[f64], end_scores: &[f64], l_span: usize) -> Result<Vec<ScoredSpan>> {
    if start_scores.len() != end_scores.len() {
        return Err(Error::contract(format!(
            "start/end score length mismatch: {} vs {}",
            start_scores.len(),
            end_scores.len()
        )));
    }
    Ok(enumerate_spans(start_scores.len(), l_span)
        .into_iter()
        .map(|(i, j)| ScoredSpan::new(i, j, start_scores[i] + end_scores[j]))
        .collect())
}

/// Greedy overlap-free selection: visit spans best-first (see [`rank_order`])
/// and accept a span iff it shares no token with an accepted one.
pub fn select_topk_nonoverlap(spans: &[ScoredSpan], k: usize) -> Vec<ScoredSpan> {
    if k == 0 {
        return Vec::new();
    }
    let mut sorted = spans.to_vec();
    sorted.sort_by(rank_order);
    let mut accepted: Vec<ScoredSpan> = Vec::with_capacity(k.min(sorted.len()));
    for span in sorted {
        if accepted.iter().all(|a| !a.overlaps(&span)) {
            accepted.push(span);
            if accepted.len() == k {
                break;
            }
        }
    }
    accepted
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BioTag {
    B,
    I,
    O,
}

/// Runs of `B I*`. An `I` not attached to a preceding `B` run is dropped.
pub fn decode_bio(tags: &[BioTag]) -> Vec<TokenRange> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for (idx, tag) in tags.iter().enumerate() {
        match tag {
            BioTag::B => {
                if let Some(s) = open.take() {
                    out.push((s, idx - 1));
                }
                open = Some(idx);
            }
            BioTag::I => {}
            BioTag::O => {
                if let Some(s) = open.take() {
                    out.push((s, idx - 1));
                }
            }
        }
    }
    if let Some(s) = open {
        out.push((s, tags.len() - 1));
    }
    out
}

/// Score spans sentence by sentence and shift them into passage coordinates.
/// No returned span crosses a sentence boundary.
pub fn score_spans_in_sentences(
    sentences: &[(TokenRange, Vec<f64>, Vec<f64>)],
    l_span: usize,
) -> Result<Vec<ScoredSpan>> {
    let mut out = Vec::new();
    for ((offset, _), start, end) in sentences {
        for s in score_spans(start, end, l_span)? {
            out.push(ScoredSpan::new(s.start + offset, s.end + offset, s.score));
        }
    }
    Ok(out)
}

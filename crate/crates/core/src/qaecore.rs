//! Answer decoding from start/end logits and the per-example extraction loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spanops::ScoredSpan;

/// Start and end logits over pipeline tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitPair {
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
}

impl LogitPair {
    pub fn new(start_logits: Vec<f64>, end_logits: Vec<f64>) -> Result<Self> {
        let pair = Self {
            start_logits,
            end_logits,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn len(&self) -> usize {
        self.start_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start_logits.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.start_logits.len() != self.end_logits.len() {
            return Err(Error::contract(format!(
                "logit length mismatch: {} start vs {} end",
                self.start_logits.len(),
                self.end_logits.len()
            )));
        }
        if self
            .start_logits
            .iter()
            .chain(&self.end_logits)
            .any(|x| !x.is_finite())
        {
            return Err(Error::contract("non-finite logit"));
        }
        Ok(())
    }
}

/// Numerically stable log-softmax (max subtraction).
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Best valid span `i <= j`, `j - i + 1 <= l_span`, maximising
/// `start[i] + end[j]`; ties go to the smaller start, then the smaller end.
pub fn decode_answer(logits: &LogitPair, l_span: usize) -> Result<ScoredSpan> {
    logits.validate()?;
    if logits.is_empty() {
        return Err(Error::contract("cannot decode an answer from empty logits"));
    }
    if l_span == 0 {
        return Err(Error::contract("l_span must be >= 1"));
    }
    let n = logits.len();
    let mut best = ScoredSpan::new(0, 0, f64::NEG_INFINITY);
    for i in 0..n {
        let s = logits.start_logits[i];
        for j in i..(i + l_span).min(n) {
            let score = s + logits.end_logits[j];
            // strict > keeps the earliest (start, end) on ties
            if score > best.score {
                best = ScoredSpan::new(i, j, score);
            }
        }
    }
    Ok(best)
}

/// `log softmax(start)[i] + log softmax(end)[j]`.
pub fn span_log_prob(logits: &LogitPair, start: usize, end: usize) -> Result<f64> {
    logits.validate()?;
    if start >= logits.len() || end >= logits.len() {
        return Err(Error::contract(format!(
            "span ({start}, {end}) out of range for {} tokens",
            logits.len()
        )));
    }
    let ls = log_softmax(&logits.start_logits);
    let le = log_softmax(&logits.end_logits);
    Ok(ls[start] + le[end])
}

/// Sum of start and end cross-entropies against the gold span.
pub fn qa_loss(logits: &LogitPair, gold: (usize, usize)) -> Result<f64> {
    let lp = span_log_prob(logits, gold.0, gold.1)?;
    // rounding can push a near-zero loss a hair negative
    Ok((-lp).max(0.0))
}

//! Evaluation and synthesis diagnostics: SQuAD-style answer normalization,
//! exact match, token F1, corpus BLEU, answer hit rate and question
//! length/vocabulary statistics.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::GoldQA;
use crate::error::{Error, Result};
use crate::synth::SyntheticExample;
use crate::tokenize::{is_punct, lower_tokens};

/// Lowercase, strip punctuation, drop standalone `a`/`an`/`the`, collapse
/// whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !is_punct(*c)).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn require_golds(golds: &[&str]) -> Result<()> {
    if golds.is_empty() {
        Err(Error::contract("at least one gold answer is required"))
    } else {
        Ok(())
    }
}

pub fn exact_match(prediction: &str, golds: &[&str]) -> Result<u8> {
    require_golds(golds)?;
    let p = normalize_answer(prediction);
    Ok(golds.iter().any(|g| normalize_answer(g) == p) as u8)
}

fn f1_single(pred_tokens: &[&str], gold_tokens: &[&str]) -> f64 {
    if pred_tokens.is_empty() || gold_tokens.is_empty() {
        return (pred_tokens.is_empty() && gold_tokens.is_empty()) as u8 as f64;
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in gold_tokens {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred_tokens {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred_tokens.len() as f64;
    let recall = common as f64 / gold_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Max over golds of token-level F1 on normalized token multisets.
pub fn f1(prediction: &str, golds: &[&str]) -> Result<f64> {
    require_golds(golds)?;
    let p = normalize_answer(prediction);
    let pt: Vec<&str> = p.split_whitespace().collect();
    Ok(golds
        .iter()
        .map(|g| {
            let g = normalize_answer(g);
            let gt: Vec<&str> = g.split_whitespace().collect();
            f1_single(&pt, &gt)
        })
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub em: f64,
    pub f1: f64,
}

/// EM and F1 as percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub em: f64,
    pub f1: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_example: Option<Vec<ExampleScore>>,
}

/// Score `predictions` (question id → answer) against the gold set. A gold
/// question without a prediction counts as 0/0.
pub fn evaluate(
    predictions: &HashMap<String, String>,
    gold: &[GoldQA],
    keep_per_example: bool,
) -> Result<EvalReport> {
    let mut per = Vec::with_capacity(gold.len());
    let (mut em_sum, mut f1_sum) = (0.0, 0.0);
    for qa in gold {
        let golds = qa.gold_answers();
        let (em, f) = match predictions.get(&qa.id) {
            Some(p) => (exact_match(p, &golds)? as f64, f1(p, &golds)?),
            None => (0.0, 0.0),
        };
        em_sum += em;
        f1_sum += f;
        if keep_per_example {
            per.push(ExampleScore {
                id: qa.id.clone(),
                em,
                f1: f,
            });
        }
    }
    let n = gold.len();
    let pct = |s: f64| if n == 0 { 0.0 } else { 100.0 * s / n as f64 };
    Ok(EvalReport {
        em: pct(em_sum),
        f1: pct(f1_sum),
        n,
        per_example: keep_per_example.then_some(per),
    })
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU with up to `max_order`-grams, uniform weights and the
/// brevity penalty against the closest reference length. Inputs are
/// lowercased and tokenized with the pipeline tokenizer.
pub fn corpus_bleu_order(candidates: &[String], references: &[Vec<String>], max_order: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates but {} reference lists",
            candidates.len(),
            references.len()
        )));
    }
    if max_order == 0 {
        return Err(Error::contract("max_order must be >= 1"));
    }
    let mut matches = vec![0usize; max_order];
    let mut totals = vec![0usize; max_order];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        let ct = lower_tokens(cand);
        let rts: Vec<Vec<String>> = refs.iter().map(|r| lower_tokens(r)).collect();
        cand_len += ct.len();
        // closest reference length, shorter wins ties
        ref_len += rts
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| ((l as i64 - ct.len() as i64).abs(), l))
            .unwrap_or(0);
        for n in 1..=max_order {
            let cc = ngram_counts(&ct, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &rts {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &cc {
                matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += ct.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 || matches.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_order as f64;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_p.exp())
}

pub fn corpus_bleu(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    corpus_bleu_order(candidates, references, 4)
}

/// Synthetic questions paired with annotated questions for BLEU.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BleuPairing {
    pub candidates: Vec<String>,
    pub references: Vec<Vec<String>>,
    pub unmatched: usize,
}

/// A synthetic question is matched to every annotated question in the same
/// passage whose gold answer normalizes equal to the synthetic answer.
pub fn pair_for_bleu(synthetic: &[SyntheticExample], gold: &[GoldQA]) -> BleuPairing {
    let mut by_key: HashMap<(&str, String), Vec<String>> = HashMap::new();
    for g in gold {
        by_key
            .entry((g.passage_id.as_str(), normalize_answer(&g.answer_text)))
            .or_default()
            .push(g.question.clone());
    }
    let mut out = BleuPairing::default();
    for s in synthetic {
        match by_key.get(&(s.passage_id.as_str(), normalize_answer(&s.answer_text))) {
            Some(refs) => {
                out.candidates.push(s.question.clone());
                out.references.push(refs.clone());
            }
            None => out.unmatched += 1,
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitRate {
    pub rate: f64,
    pub hits: usize,
    /// Gold answers counted: those whose passage has synthetic examples.
    pub n: usize,
}

/// Fraction of gold answers covered by a normalized-equal synthetic answer in
/// the same passage. Golds from passages with no synthetic examples are not
/// counted; `n == 0` signals that nothing was comparable.
pub fn hit_rate(synthetic: &[SyntheticExample], gold: &[GoldQA]) -> HitRate {
    let mut answers: HashMap<&str, HashSet<String>> = HashMap::new();
    for s in synthetic {
        answers
            .entry(s.passage_id.as_str())
            .or_default()
            .insert(normalize_answer(&s.answer_text));
    }
    let (mut hits, mut n) = (0, 0);
    for g in gold {
        if let Some(set) = answers.get(g.passage_id.as_str()) {
            n += 1;
            if g.gold_answers().iter().any(|a| set.contains(&normalize_answer(a))) {
                hits += 1;
            }
        }
    }
    HitRate {
        rate: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        hits,
        n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionStats {
    pub n: usize,
    pub mean_len: f64,
    /// Population standard deviation.
    pub std_len: f64,
    pub distinct_vocab: usize,
    pub total_tokens: usize,
}

pub fn question_stats<S: AsRef<str>>(questions: &[S]) -> QuestionStats {
    if questions.is_empty() {
        return QuestionStats {
            n: 0,
            mean_len: 0.0,
            std_len: 0.0,
            distinct_vocab: 0,
            total_tokens: 0,
        };
    }
    let mut vocab = HashSet::new();
    let mut lens = Vec::with_capacity(questions.len());
    for q in questions {
        let toks = lower_tokens(q.as_ref());
        lens.push(toks.len() as f64);
        vocab.extend(toks);
    }
    let n = lens.len() as f64;
    let mean = lens.iter().sum::<f64>() / n;
    let var = lens.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    QuestionStats {
        n: questions.len(),
        mean_len: mean,
        std_len: var.sqrt(),
        distinct_vocab: vocab.len(),
        total_tokens: lens.iter().sum::<f64>() as usize,
    }
}

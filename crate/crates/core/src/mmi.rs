//! Test-time maximum-mutual-information answer reranking.
//!
//! Each candidate answer is scored by
//! `alpha * log P_qg(q | p, a) + beta * log P_qa(a | p, q)`, where the QG
//! term is down-weighted per candidate by [`adaptive_alpha`] whenever the
//! input question's perplexity strays from the perplexity of the question the
//! generator itself produces for that candidate.

use serde::{Deserialize, Serialize};

use crate::backends::ScoringBackend;
use crate::corpus::Passage;
use crate::error::{Error, Result};
use crate::qaecore::{decode_answer, span_log_prob, LogitPair};
use crate::spanops::{AerConfig, ScoredSpan};
use crate::synth::{generate_question, mask_passage, synthesize_candidates};
use crate::tokenize::lower_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    QaeTop,
    Aer,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmiCandidate {
    pub span: ScoredSpan,
    pub log_p_qa: f64,
    pub log_p_qg: f64,
    /// Input question perplexity under the generator given this candidate.
    pub ppl_input: f64,
    /// Perplexity of the generator's own question for this candidate.
    pub ppl_gen: f64,
    pub source: CandidateSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MmiConfig {
    pub beta: f64,
    /// Recognizer-derived candidates added to the extractor's top span.
    pub k: usize,
    pub alpha_floor: f64,
}

impl Default for MmiConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            k: 20,
            alpha_floor: 0.1,
        }
    }
}

/// `max(1 - |ppl_input / ppl_gen - 1|, floor)`.
pub fn adaptive_alpha(ppl_input: f64, ppl_gen: f64, floor: f64) -> Result<f64> {
    if !(ppl_input > 0.0) || !(ppl_gen > 0.0) {
        return Err(Error::contract(format!(
            "perplexities must be positive, got {ppl_input} and {ppl_gen}"
        )));
    }
    let ratio = ppl_input / ppl_gen;
    Ok((1.0 - (ratio - 1.0).abs()).max(floor).min(1.0))
}

/// `qae_top` first, then up to `k` recognizer candidates. A recognizer
/// candidate with the same token range as one already present is merged
/// into it and marks it [`CandidateSource::Both`].
pub fn build_candidates(qae_top: MmiCandidate, aer_candidates: &[MmiCandidate], k: usize) -> Vec<MmiCandidate> {
    let mut out = vec![qae_top];
    for c in aer_candidates.iter().take(k) {
        if let Some(existing) = out.iter_mut().find(|e| e.span.range() == c.span.range()) {
            if existing.source != c.source {
                existing.source = CandidateSource::Both;
            }
        } else {
            out.push(c.clone());
        }
    }
    out
}

pub fn mmi_score(c: &MmiCandidate, config: &MmiConfig) -> Result<f64> {
    let alpha = adaptive_alpha(c.ppl_input, c.ppl_gen, config.alpha_floor)?;
    Ok(alpha * c.log_p_qg + config.beta * c.log_p_qa)
}

/// The candidate with the highest MMI score. Exact ties go to the
/// extractor's top candidate, otherwise to the lowest start index.
pub fn mmi_rerank<'a>(candidates: &'a [MmiCandidate], config: &MmiConfig) -> Result<&'a MmiCandidate> {
    if candidates.is_empty() {
        return Err(Error::contract("MMI reranking needs at least one candidate"));
    }
    let scores = candidates
        .iter()
        .map(|c| mmi_score(c, config))
        .collect::<Result<Vec<f64>>>()?;
    let is_top = |c: &MmiCandidate| c.source != CandidateSource::Aer;
    let mut best = 0;
    for i in 1..candidates.len() {
        let (c, b) = (&candidates[i], &candidates[best]);
        let better = scores[i] > scores[best]
            || (scores[i] == scores[best]
                && !is_top(b)
                && (is_top(c) || c.span.start < b.span.start));
        if better {
            best = i;
        }
    }
    Ok(&candidates[best])
}

/// Everything needed to score one candidate span against an input question.
fn score_candidate<B: ScoringBackend + ?Sized>(
    backend: &B,
    passage: &Passage,
    question: &str,
    logits: &LogitPair,
    span: ScoredSpan,
    source: CandidateSource,
) -> Result<MmiCandidate> {
    let masked = mask_passage(passage, &span)?;
    let (_, ppl_gen) = generate_question(backend, &masked, &passage.id)?;
    let ppl_input = backend
        .qg_score(&masked.text, &masked.entity_text, question)
        .map_err(|e| e.with_passage(&passage.id))?;
    if !(ppl_input > 0.0) {
        return Err(Error::Protocol(format!("non-positive perplexity {ppl_input}")));
    }
    // total log-probability of the question: -T * ln(perplexity)
    let t = lower_tokens(question).len().max(1) as f64;
    Ok(MmiCandidate {
        span,
        log_p_qa: span_log_prob(logits, span.start, span.end)?,
        log_p_qg: -t * ppl_input.ln(),
        ppl_input,
        ppl_gen,
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmiPrediction {
    pub answer: ScoredSpan,
    pub answer_text: String,
    pub qae_top: ScoredSpan,
    pub candidates: usize,
}

/// Answer `question` over `passage`: the extractor's best span plus the
/// fine-grained answers the synthesis pipeline finds for the passage
/// (`aer_spans`, best first), reranked by MMI.
pub fn answer_with_mmi<B: ScoringBackend + ?Sized>(
    backend: &B,
    passage: &Passage,
    question: &str,
    aer_spans: &[ScoredSpan],
    l_span: usize,
    config: &MmiConfig,
) -> Result<MmiPrediction> {
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
    let top = decode_answer(&logits, l_span)?;
    let top_c = score_candidate(backend, passage, question, &logits, top, CandidateSource::QaeTop)?;

    let mut aer: Vec<MmiCandidate> = Vec::new();
    for span in aer_spans {
        if aer.len() >= config.k {
            break;
        }
        if aer.iter().any(|c| c.span.range() == span.range()) {
            continue;
        }
        if span.range() == top.range() {
            aer.push(MmiCandidate {
                source: CandidateSource::Aer,
                ..top_c.clone()
            });
            continue;
        }
        match score_candidate(backend, passage, question, &logits, *span, CandidateSource::Aer) {
            Ok(c) => aer.push(c),
            Err(e) if e.is_transport() => return Err(e),
            Err(e) => log::warn!("skipping MMI candidate in {}: {e}", passage.id),
        }
    }
    let cands = build_candidates(top_c, &aer, config.k);
    let win = mmi_rerank(&cands, config)?;
    Ok(MmiPrediction {
        answer: win.span,
        answer_text: passage.span_text(win.span.start, win.span.end)?.to_string(),
        qae_top: top,
        candidates: cands.len(),
    })
}

/// Fine-grained answer spans for a passage, in recognizer order, deduplicated.
pub fn passage_answer_spans<B: ScoringBackend + ?Sized>(
    backend: &B,
    passage: &Passage,
    aer: &AerConfig,
) -> Result<Vec<ScoredSpan>> {
    let (cands, _) = synthesize_candidates(backend, passage, aer)?;
    let mut out: Vec<ScoredSpan> = Vec::new();
    for c in cands {
        if !out.iter().any(|s| s.range() == c.example.answer.range()) {
            out.push(c.example.answer);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::MockBackend;
    use proptest::prelude::*;

    fn c(start: usize, qa: f64, qg: f64, ppl_in: f64, ppl_gen: f64, source: CandidateSource) -> MmiCandidate {
        MmiCandidate {
            span: ScoredSpan::new(start, start, 0.0),
            log_p_qa: qa,
            log_p_qg: qg,
            ppl_input: ppl_in,
            ppl_gen,
            source,
        }
    }

    #[test]
    fn alpha_cases() {
        let f = 0.1;
        assert!((adaptive_alpha(1.0, 1.0, f).unwrap() - 1.0).abs() < 1e-12);
        assert!((adaptive_alpha(2.6, 2.0, f).unwrap() - 0.7).abs() < 1e-12);
        assert!((adaptive_alpha(5.0, 2.0, f).unwrap() - 0.1).abs() < 1e-12);
        assert!(adaptive_alpha(0.0, 1.0, f).is_err());
        assert!(adaptive_alpha(1.0, -1.0, f).is_err());
    }

    #[test]
    fn rerank_arithmetic() {
        // alpha 0.1 via ratio 2.5; alpha 1.0 via ratio 1
        let a = c(3, -0.1, -5.0, 5.0, 2.0, CandidateSource::Aer);
        let b = c(1, -1.0, -0.5, 1.0, 1.0, CandidateSource::QaeTop);
        let cfg = MmiConfig::default();
        assert!((mmi_score(&a, &cfg).unwrap() + 0.6).abs() < 1e-12);
        assert!((mmi_score(&b, &cfg).unwrap() + 1.5).abs() < 1e-12);
        let cands = [b.clone(), a.clone()];
        assert_eq!(mmi_rerank(&cands, &cfg).unwrap(), &a);
        assert_eq!(mmi_rerank(&cands[..1], &cfg).unwrap(), &b);
        assert!(mmi_rerank(&[], &cfg).is_err());
    }

    #[test]
    fn rerank_ties() {
        let cfg = MmiConfig::default();
        let top = c(5, -1.0, -1.0, 1.0, 1.0, CandidateSource::QaeTop);
        let x = c(2, -1.0, -1.0, 1.0, 1.0, CandidateSource::Aer);
        let y = c(1, -1.0, -1.0, 1.0, 1.0, CandidateSource::Aer);
        assert_eq!(mmi_rerank(&[x.clone(), top.clone(), y.clone()], &cfg).unwrap(), &top);
        assert_eq!(mmi_rerank(&[x, y.clone()], &cfg).unwrap(), &y);
    }

    #[test]
    fn candidate_building() {
        let top = c(1, -0.5, -1.0, 1.0, 1.0, CandidateSource::QaeTop);
        let aer = vec![
            c(4, -2.0, -1.0, 1.0, 1.0, CandidateSource::Aer),
            c(1, -0.5, -1.0, 1.0, 1.0, CandidateSource::Aer),
            c(6, -3.0, -1.0, 1.0, 1.0, CandidateSource::Aer),
        ];
        let got = build_candidates(top.clone(), &aer, 20);
        assert_eq!(got.len(), 3);
        assert_eq!(got[0].source, CandidateSource::Both);
        assert_eq!(build_candidates(top.clone(), &aer, 0), vec![top]);
        assert_eq!(MmiConfig::default().k, 20);
        assert_eq!(MmiConfig::default().beta, 1.0);
    }

    #[test]
    fn echo_backend_answers_with_mmi() {
        let p = Passage::new("p", "The grotto was built in 1858 near Lourdes.");
        let m = MockBackend::echo();
        let spans = passage_answer_spans(&m, &p, &AerConfig::default()).unwrap();
        let pred = answer_with_mmi(&m, &p, "what is Lourdes?", &spans, 10, &MmiConfig::default()).unwrap();
        assert_eq!(pred.answer_text, "Lourdes");
        assert!(pred.candidates >= 1);
    }

    proptest! {
        #[test]
        fn alpha_in_range(a in 1e-6f64..1e6, b in 1e-6f64..1e6) {
            let v = adaptive_alpha(a, b, 0.1).unwrap();
            prop_assert!((0.1..=1.0).contains(&v));
        }

        #[test]
        fn dominated_candidate_does_not_change_winner(
            xs in prop::collection::vec((-10.0f64..0.0, -10.0f64..0.0, 1.0f64..5.0, 1.0f64..5.0), 1..15),
        ) {
            let cfg = MmiConfig::default();
            let cands: Vec<MmiCandidate> = xs.iter().enumerate()
                .map(|(i, &(qa, qg, pi, pg))| c(i, qa, qg, pi, pg, if i == 0 { CandidateSource::QaeTop } else { CandidateSource::Aer }))
                .collect();
            let w = mmi_rerank(&cands, &cfg).unwrap().clone();
            let ws = mmi_score(&w, &cfg).unwrap();
            let mut more = cands.clone();
            // alpha 1, log_p_qg 0: score is log_p_qa alone
            more.push(c(99, ws - 1.0, 0.0, 1.0, 1.0, CandidateSource::Aer));
            prop_assert_eq!(mmi_rerank(&more, &cfg).unwrap(), &w);
        }
    }
}

//! Acceptance suite. Runs every criterion, prints one PASS/FAIL/SKIP line
//! each, and exits non-zero if any criterion failed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rgx_core::backends::MockBackend;
use rgx_core::corpus::{load_squad, read_synthetic};
use rgx_core::emselect::{fit_em_1d, EmConfig, VARIANCE_FLOOR};
use rgx_core::looper::{run_iteration, LoopConfig, LoopState};
use rgx_core::metrics::{corpus_bleu, corpus_bleu_order, exact_match, f1, hit_rate, normalize_answer, question_stats};
use rgx_core::mmi::{adaptive_alpha, mmi_rerank, CandidateSource, MmiCandidate, MmiConfig};
use rgx_core::plantgen::planted_corpus;
use rgx_core::qaecore::{decode_answer, qa_loss, LogitPair};
use rgx_core::spanops::{score_spans, select_topk_nonoverlap, ScoredSpan};
use rgx_core::synth::Bucket;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, || format!("took {elapsed:?}, limit {limit:?}"))
}

// ---- span decoding -------------------------------------------------------

fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // integer-valued half the time so ties are exercised
    if rng.gen_bool(0.5) {
        (0..n).map(|_| rng.gen_range(-3..=3) as f64).collect()
    } else {
        (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect()
    }
}

fn oracle_all_spans(s: &[f64], e: &[f64], l_span: usize) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..s.len() {
        for j in i..s.len() {
            if j - i < l_span {
                out.push((i, j, s[i] + e[j]));
            }
        }
    }
    out
}

fn oracle_decode(s: &[f64], e: &[f64], l_span: usize) -> (usize, usize, f64) {
    let mut best = (0, 0, f64::NEG_INFINITY);
    for (i, j, v) in oracle_all_spans(s, e, l_span) {
        if v > best.2 {
            best = (i, j, v);
        }
    }
    best
}

fn oracle_topk(s: &[f64], e: &[f64], l_span: usize, k: usize) -> Vec<(usize, usize, f64)> {
    let mut all = oracle_all_spans(s, e, l_span);
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used = vec![false; s.len()];
    let mut out = Vec::new();
    for (i, j, v) in all {
        if out.len() == k {
            break;
        }
        if (i..=j).all(|t| !used[t]) {
            (i..=j).for_each(|t| used[t] = true);
            out.push((i, j, v));
        }
    }
    out
}

fn span_decode_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let n = rng.gen_range(1..=30);
        let l_span = rng.gen_range(1..=10);
        let k = rng.gen_range(1..=12);
        let s = random_scores(&mut rng, n);
        let e = random_scores(&mut rng, n);
        let got = decode_answer(&LogitPair::new(s.clone(), e.clone()).unwrap(), l_span).unwrap();
        let want = oracle_decode(&s, &e, l_span);
        check((got.start, got.end, got.score) == want, || {
            format!("case {case}: decode {got:?} != oracle {want:?}")
        })?;
        let spans = score_spans(&s, &e, l_span).unwrap();
        let got: Vec<(usize, usize, f64)> = select_topk_nonoverlap(&spans, k)
            .iter()
            .map(|sp: &ScoredSpan| (sp.start, sp.end, sp.score))
            .collect();
        let want = oracle_topk(&s, &e, l_span, k);
        check(got == want, || format!("case {case}: top-{k} {got:?} != oracle {want:?}"))?;
    }
    within(t0.elapsed(), Duration::from_secs(5))?;
    Ok(format!("1000 instances exact in {:?}", t0.elapsed()))
}

// ---- EM selector ---------------------------------------------------------

fn em_monotone() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut steps = 0;
    for set in 0..200 {
        let n = rng.gen_range(3..=150);
        let xs: Vec<f64> = (0..n)
            .map(|_| match rng.gen_range(0..3) {
                0 => rng.gen_range(0.0..0.5),
                1 => rng.gen_range(0.5..3.0),
                _ => rng.gen_range(2.0..12.0),
            })
            .collect();
        let fit = fit_em_1d(&xs, &EmConfig::default()).map_err(|e| format!("set {set}: {e}"))?;
        for w in fit.trace.windows(2) {
            check(w[1] >= w[0] - 1e-9, || format!("set {set}: log-likelihood fell {} -> {}", w[0], w[1]))?;
        }
        steps += fit.trace.len() - 1;
    }
    within(t0.elapsed(), Duration::from_secs(10))?;
    Ok(format!("200 sets, {steps} EM steps, no decrease"))
}

fn log_normal(x: f64, m: f64, v: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m).powi(2) / v)
}

/// Contiguous 3-way split of sorted data maximizing classification
/// likelihood, with each group fit by its own mean, variance and weight.
fn best_contiguous_split(sorted: &[f64]) -> (usize, usize) {
    let n = sorted.len();
    let group = |g: &[f64]| {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        let v = (g.iter().map(|x| (x - m).powi(2)).sum::<f64>() / g.len() as f64).max(VARIANCE_FLOOR);
        let w = (g.len() as f64 / n as f64).ln();
        g.iter().map(|&x| w + log_normal(x, m, v)).sum::<f64>()
    };
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for a in 1..n - 1 {
        for b in a + 1..n {
            let ll = group(&sorted[..a]) + group(&sorted[a..b]) + group(&sorted[b..]);
            if ll > best.0 {
                best = (ll, a, b);
            }
        }
    }
    (best.1, best.2)
}

fn em_partition() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for set in 0..200 {
        // clusters of width at most `spread`, gaps between them over 10x that
        let spread = rng.gen_range(0.01..0.3);
        let mut lo = rng.gen_range(0.0..1.0);
        let mut xs = Vec::new();
        for _ in 0..3 {
            let width = spread * rng.gen_range(0.2..1.0);
            for _ in 0..rng.gen_range(6..=30) {
                xs.push(lo + rng.gen_range(0.0..=width));
            }
            lo += width + spread * rng.gen_range(10.5..30.0);
        }
        // shuffle so input order carries no information
        for i in (1..xs.len()).rev() {
            xs.swap(i, rng.gen_range(0..=i));
        }
        let fit = fit_em_1d(&xs, &EmConfig::default()).map_err(|e| format!("set {set}: {e}"))?;
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let labels: Vec<usize> = order.iter().map(|&i| fit.assignments[i]).collect();
        check(labels.windows(2).all(|w| w[0] <= w[1]), || {
            format!("set {set}: assignments not monotone in loss")
        })?;
        let sorted: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
        let (a, b) = best_contiguous_split(&sorted);
        let want: Vec<usize> = (0..sorted.len()).map(|i| (i >= a) as usize + (i >= b) as usize).collect();
        check(labels == want, || {
            let counts = |l: &[usize]| (0..3).map(|c| l.iter().filter(|&&x| x == c).count()).collect::<Vec<_>>();
            format!(
                "set {set}: EM counts {:?} vs brute-force split ({a}, {b}); means {:?}",
                counts(&labels),
                fit.model.means
            )
        })?;
    }
    within(t0.elapsed(), Duration::from_secs(10))?;
    Ok(format!("200 separated sets match brute force in {:?}", t0.elapsed()))
}

// ---- MMI -----------------------------------------------------------------

fn mmi_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = MmiConfig::default();
    for set in 0..1000 {
        let n = rng.gen_range(1..=21);
        let log_p_qg = rng.gen_range(-30.0..0.0);
        let ppl = rng.gen_range(1.0..50.0);
        let mut starts: Vec<usize> = (0..60).collect();
        for i in (1..starts.len()).rev() {
            starts.swap(i, rng.gen_range(0..=i));
        }
        let cands: Vec<MmiCandidate> = (0..n)
            .map(|i| MmiCandidate {
                span: ScoredSpan::new(starts[i], starts[i], 0.0),
                log_p_qa: if rng.gen_bool(0.2) { -1.0 } else { rng.gen_range(-20.0..0.0) },
                log_p_qg,
                ppl_input: ppl,
                ppl_gen: ppl,
                source: if i == 0 { CandidateSource::QaeTop } else { CandidateSource::Aer },
            })
            .collect();
        // plain extractor argmax: highest log P_qa, ties to the extractor's
        // own top candidate, then to the lowest start
        let mut want = 0;
        for i in 1..n {
            let (c, b) = (&cands[i], &cands[want]);
            if c.log_p_qa > b.log_p_qa
                || (c.log_p_qa == b.log_p_qa && want != 0 && c.span.start < b.span.start)
            {
                want = i;
            }
        }
        let got = mmi_rerank(&cands, &cfg).map_err(|e| e.to_string())?;
        check(got == &cands[want], || format!("set {set}: reranked {got:?}, argmax {:?}", cands[want]))?;
    }
    Ok("1000 sets equal extractor argmax".into())
}

fn alpha_cases() -> Outcome {
    let cases = [(1.0, 1.0, 1.0), (1.3, 1.0, 0.7), (2.0, 1.0, 0.1), (2.5, 1.0, 0.1), (13.0, 10.0, 0.7)];
    for (pi, pg, want) in cases {
        let got = adaptive_alpha(pi, pg, 0.1).map_err(|e| e.to_string())?;
        check((got - want).abs() <= 1e-12, || format!("alpha({pi}, {pg}) = {got}, want {want}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let a = 10f64.powf(rng.gen_range(-3.0..4.0));
        let b = 10f64.powf(rng.gen_range(-3.0..4.0));
        let v = adaptive_alpha(a, b, 0.1).map_err(|e| e.to_string())?;
        check((0.1..=1.0).contains(&v), || format!("alpha({a}, {b}) = {v} outside [0.1, 1]"))?;
    }
    check(adaptive_alpha(0.0, 1.0, 0.1).is_err(), || "zero perplexity accepted".into())?;
    Ok("exact cases and 10000 random pairs in [0.1, 1]".into())
}

// ---- metrics -------------------------------------------------------------

fn metrics_golden() -> Outcome {
    // (prediction, golds, EM, F1)
    let cases: &[(&str, &[&str], u8, f64)] = &[
        ("a golden statue", &["golden statue of the Virgin Mary"], 0, 4.0 / 7.0),
        ("Saint Bernadette Soubirous", &["Saint Bernadette Soubirous"], 1, 1.0),
        ("saint bernadette soubirous", &["Saint Bernadette Soubirous"], 1, 1.0),
        ("Saint Bernadette Soubirous.", &["Saint Bernadette Soubirous"], 1, 1.0),
        ("the Grotto", &["a Grotto"], 1, 1.0),
        ("1858", &["1858"], 1, 1.0),
        ("in 1858", &["1858"], 0, 2.0 / 3.0),
        ("1858", &["in 1858"], 0, 2.0 / 3.0),
        ("Lourdes, France", &["Lourdes France"], 1, 1.0),
        ("Lourdes", &["Lourdes, France"], 0, 2.0 / 3.0),
        ("copper statue of Christ", &["a copper statue of Christ"], 1, 1.0),
        ("statue of Christ", &["a copper statue of Christ"], 0, 6.0 / 7.0),
        ("the Main Building", &["Main Building", "the Basilica"], 1, 1.0),
        ("Basilica of the Sacred Heart", &["the Main Building", "Sacred Heart"], 0, 2.0 / 3.0),
        ("Venite Ad Me Omnes", &["\"Venite Ad Me Omnes\""], 1, 1.0),
        ("gold dome", &["Gold Dome"], 1, 1.0),
        ("stone statue", &["a simple, modern stone statue of Mary"], 0, 0.5),
        ("Mary", &["Joseph"], 0, 0.0),
        ("", &["Mary"], 0, 0.0),
        ("the", &["a"], 1, 1.0),
        ("prayer and reflection", &["a Marian place of prayer and reflection"], 0, 2.0 / 3.0),
        ("x x y", &["x y y"], 0, 2.0 / 3.0),
        ("  Main   Building ", &["main building"], 1, 1.0),
    ];
    for (pred, golds, em, want_f1) in cases {
        let got_em = exact_match(pred, golds).map_err(|e| e.to_string())?;
        let got_f1 = f1(pred, golds).map_err(|e| e.to_string())?;
        check(got_em == *em, || format!("EM({pred:?}, {golds:?}) = {got_em}, want {em}"))?;
        check((got_f1 - want_f1).abs() <= 1e-9, || {
            format!("F1({pred:?}, {golds:?}) = {got_f1}, want {want_f1}")
        })?;
    }
    let q = vec!["what is mentioned right after the grotto at lourdes?".to_string()];
    let self_match = corpus_bleu(&q, std::slice::from_ref(&q)).map_err(|e| e.to_string())?;
    check(self_match == 1.0, || format!("BLEU self-match {self_match}"))?;
    let desk = corpus_bleu_order(&["b c d".into()], &[vec!["a b c d".into()]], 3).map_err(|e| e.to_string())?;
    check((desk - 0.7165).abs() <= 1e-4, || format!("BLEU-3 desk case {desk}"))?;
    Ok(format!("{} EM/F1 cases, BLEU self 1.0, desk {desk:.6}", cases.len()))
}

// ---- extractor loss ------------------------------------------------------

fn qa_loss_cases() -> Outcome {
    let uniform = LogitPair::new(vec![0.0; 4], vec![0.0; 4]).unwrap();
    let v = qa_loss(&uniform, (1, 2)).map_err(|e| e.to_string())?;
    let want = 2.0 * 4f64.ln();
    check((v - want).abs() <= 1e-9, || format!("uniform loss {v}, want {want}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..500 {
        let n = rng.gen_range(1..=40);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let e: Vec<f64> = (0..n).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let (c1, c2) = (rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0));
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(i..n);
        let a = qa_loss(&LogitPair::new(s.clone(), e.clone()).unwrap(), (i, j)).unwrap();
        let shifted = LogitPair::new(s.iter().map(|x| x + c1).collect(), e.iter().map(|x| x + c2).collect()).unwrap();
        let b = qa_loss(&shifted, (i, j)).unwrap();
        check((a - b).abs() <= 1e-9, || format!("shift changed loss {a} -> {b}"))?;
    }
    Ok(format!("uniform L=4 loss {v:.12}, 500 shifts invariant"))
}

// ---- end-to-end planted harness ------------------------------------------

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
        }
    }
    out
}

fn planted_run(out: &Path) -> Result<LoopState, String> {
    let pc = planted_corpus(50, 2024);
    let backend = MockBackend::planted(&pc.entities, 0.5, 2024);
    let config = LoopConfig {
        out_dir: out.to_path_buf(),
        ..LoopConfig::default()
    };
    run_iteration(
        &LoopState::initial("qg-base", "qae-base"),
        &pc.corpus.passages,
        &pc.corpus.qa_pairs,
        &backend,
        &config,
    )
    .map_err(|e| e.to_string())
}

fn e2e_planted() -> Outcome {
    let t0 = Instant::now();
    let d1 = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d2 = tempfile::tempdir().map_err(|e| e.to_string())?;
    let state = planted_run(d1.path())?;
    planted_run(d2.path())?;
    let elapsed = t0.elapsed();

    let pc = planted_corpus(50, 2024);
    let iter_dir: PathBuf = d1.path().join("iter-1");
    let labeled = read_synthetic(iter_dir.join("synthetic.jsonl")).map_err(|e| e.to_string())?;
    let selected = read_synthetic(iter_dir.join("selected.jsonl")).map_err(|e| e.to_string())?;

    // every planted entity, including those in passages with no output
    let mut found: HashMap<&str, HashSet<String>> = HashMap::new();
    for ex in &selected {
        found.entry(ex.passage_id.as_str()).or_default().insert(normalize_answer(&ex.answer_text));
    }
    let total = pc.corpus.qa_pairs.len();
    let hits = pc
        .corpus
        .qa_pairs
        .iter()
        .filter(|g| found.get(g.passage_id.as_str()).is_some_and(|s| s.contains(&normalize_answer(&g.answer_text))))
        .count();
    let strict = hits as f64 / total as f64;
    let hr = hit_rate(&selected, &pc.corpus.qa_pairs);
    check(strict >= 0.95, || format!("strict hit rate {strict:.3} ({hits}/{total})"))?;
    check(hr.rate >= 0.95, || format!("hit rate {:.3}", hr.rate))?;
    check(state.metrics_snapshot.get("hit_rate") == Some(&hr.rate), || {
        "state hit rate disagrees with recomputation".into()
    })?;

    // nothing labeled difficult reaches either finetuning file
    let difficult: HashSet<(String, String, String)> = labeled
        .iter()
        .filter(|e| e.bucket == Some(Bucket::Difficult))
        .map(|e| (e.passage_id.clone(), e.question.clone(), e.answer_text.clone()))
        .collect();
    check(selected.iter().all(|e| e.bucket.is_some_and(Bucket::is_selected)), || {
        "selected set carries an unselected bucket".into()
    })?;
    let qae = load_squad(iter_dir.join("qae_finetune.json")).map_err(|e| e.to_string())?;
    let qae_keys: Vec<(String, String, String)> = qae
        .qa_pairs
        .iter()
        .map(|g| {
            let pid = qae.passage(&g.passage_id).unwrap();
            let original = pc.corpus.passages.iter().find(|p| p.text == pid.text).unwrap();
            (original.id.clone(), g.question.clone(), g.answer_text.clone())
        })
        .collect();
    check(qae_keys.len() == selected.len(), || {
        format!("extractor set has {} pairs, selection {}", qae_keys.len(), selected.len())
    })?;
    check(qae_keys.iter().all(|k| !difficult.contains(k)), || "difficult pair in extractor set".into())?;
    let qg_targets: Vec<String> = std::fs::read_to_string(iter_dir.join("qg_finetune.jsonl"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["target"].as_str().unwrap().to_string())
        .collect();
    check(qg_targets.len() == selected.len(), || "generator set size differs from selection".into())?;
    let difficult_questions: HashSet<&str> = difficult.iter().map(|k| k.1.as_str()).collect();
    let selected_questions: HashSet<&str> = selected.iter().map(|e| e.question.as_str()).collect();
    check(
        qg_targets
            .iter()
            .all(|q| selected_questions.contains(q.as_str()) || !difficult_questions.contains(q.as_str())),
        || "difficult question in generator set".into(),
    )?;

    // byte-identical reruns
    let (a, b) = (read_dir_bytes(&iter_dir), read_dir_bytes(&d2.path().join("iter-1")));
    check(a == b, || {
        let differ: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
        format!("reruns differ in {differ:?}")
    })?;
    let state_a = std::fs::read_to_string(d1.path().join("state.json")).unwrap();
    let state_b = std::fs::read_to_string(d2.path().join("state.json")).unwrap();
    let norm = |s: &str, d: &Path| s.replace(&d.to_string_lossy().into_owned(), "<out>");
    check(norm(&state_a, d1.path()) == norm(&state_b, d2.path()), || "state files differ".into())?;

    let n_difficult = difficult.len();
    within(elapsed, Duration::from_secs(60))?;
    Ok(format!(
        "hit {strict:.3} ({hits}/{total}), {} selected, {n_difficult} difficult held out, reruns identical, {elapsed:?}",
        selected.len()
    ))
}

// ---- ingestion -----------------------------------------------------------

/// `None` when no SQuAD v1.1 train file is available.
fn squad_ingestion() -> Option<Outcome> {
    let path = std::env::var_os("RGX_SQUAD_TRAIN").map(PathBuf::from)?;
    if !path.exists() {
        return None;
    }
    Some((|| {
        let corpus = load_squad(&path).map_err(|e| e.to_string())?;
        let qs: Vec<&str> = corpus.qa_pairs.iter().map(|q| q.question.as_str()).collect();
        let st = question_stats(&qs);
        check((st.mean_len - 11.29).abs() <= 0.5, || {
            format!("mean question length {:.3} over {} questions", st.mean_len, st.n)
        })?;
        Ok(format!("mean question length {:.3} over {} questions", st.mean_len, st.n))
    })())
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("span-decode oracle", span_decode_oracle),
        ("EM log-likelihood monotone", em_monotone),
        ("EM partition matches brute force", em_partition),
        ("MMI reduces to extractor argmax", mmi_reduction),
        ("adaptive alpha", alpha_cases),
        ("metrics golden suite", metrics_golden),
        ("end-to-end planted harness", e2e_planted),
        ("qa_loss uniform and shift", qa_loss_cases),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    match squad_ingestion() {
        Some(Ok(detail)) => println!("PASS  SQuAD ingestion: {detail}"),
        Some(Err(why)) => {
            failed += 1;
            println!("FAIL  SQuAD ingestion: {why}");
        }
        None => println!("SKIP  SQuAD ingestion: set RGX_SQUAD_TRAIN to a SQuAD v1.1 train file"),
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

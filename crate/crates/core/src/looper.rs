//! The cooperative self-training cycle.
//!
//! One iteration synthesizes QA pairs over the passages, buckets them by
//! extractor loss, writes finetuning sets for the extractor (SQuAD JSON) and
//! the generator (`{source, target}` JSONL), and submits both to the backend.
//! Everything is written under `<out_dir>/iter-<n>/`; the loop state lives in
//! `<out_dir>/state.json`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backends::{qg_source, JobStatus, ModelKind, ScoringBackend};
use crate::corpus::{write_synthetic, GoldQA, Passage};
use crate::emselect::{bucket_and_select, PassageSelection, SelectionPolicy};
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, hit_rate, pair_for_bleu, question_stats};
use crate::synth::{mask_passage, synthesize_corpus, Bucket, SynthConfig, SyntheticExample};

pub const STATE_SCHEMA_VERSION: u32 = 1;
pub const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub schema_version: u32,
    pub iteration: usize,
    pub synthetic_dataset_path: Option<PathBuf>,
    pub selection_report_path: Option<PathBuf>,
    pub qae_finetune_path: Option<PathBuf>,
    pub qg_finetune_path: Option<PathBuf>,
    pub qg_model_ref: String,
    pub qae_model_ref: String,
    pub metrics_snapshot: BTreeMap<String, f64>,
}

impl LoopState {
    pub fn initial(qg_model_ref: impl Into<String>, qae_model_ref: impl Into<String>) -> Self {
        Self {
            schema_version: STATE_SCHEMA_VERSION,
            iteration: 0,
            synthetic_dataset_path: None,
            selection_report_path: None,
            qae_finetune_path: None,
            qg_finetune_path: None,
            qg_model_ref: qg_model_ref.into(),
            qae_model_ref: qae_model_ref.into(),
            metrics_snapshot: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string_pretty(self).expect("state serializes");
        fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Reload a saved loop state.
pub fn resume(path: impl AsRef<Path>) -> Result<LoopState> {
    let path = path.as_ref();
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&body).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == STATE_SCHEMA_VERSION as u64 => {}
        other => {
            return Err(Error::SchemaVersion {
                path: path.to_path_buf(),
                expected: STATE_SCHEMA_VERSION,
                found: other.map(|v| v.to_string()).unwrap_or_else(|| "missing".into()),
            })
        }
    }
    serde_path_to_error::deserialize(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        location: e.path().to_string(),
        message: e.into_inner().to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub synth: SynthConfig,
    pub selection: SelectionPolicy,
    pub out_dir: PathBuf,
    /// Rerun synthesis after finetuning. `None` means: only when the backend
    /// performs real finetuning.
    pub resynthesize: Option<bool>,
    pub poll_interval_ms: u64,
    pub max_polls: u32,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            selection: SelectionPolicy::default(),
            out_dir: PathBuf::from("rgx-out"),
            resynthesize: None,
            poll_interval_ms: 5000,
            max_polls: 720,
        }
    }
}

#[derive(Serialize)]
struct SquadOut<'a> {
    version: &'static str,
    data: Vec<SquadArticleOut<'a>>,
}

#[derive(Serialize)]
struct SquadArticleOut<'a> {
    title: &'a str,
    paragraphs: Vec<SquadParagraphOut<'a>>,
}

#[derive(Serialize)]
struct SquadParagraphOut<'a> {
    context: &'a str,
    qas: Vec<SquadQaOut<'a>>,
}

#[derive(Serialize)]
struct SquadQaOut<'a> {
    id: String,
    question: &'a str,
    answers: Vec<SquadAnswerOut<'a>>,
}

#[derive(Serialize)]
struct SquadAnswerOut<'a> {
    text: &'a str,
    answer_start: usize,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct QgPair {
    pub source: String,
    pub target: String,
}

fn passage_index(passages: &[Passage]) -> HashMap<&str, &Passage> {
    passages.iter().map(|p| (p.id.as_str(), p)).collect()
}

/// Extractor finetuning set in SQuAD v1.1 layout, one article per passage.
pub fn write_qae_finetune(examples: &[SyntheticExample], passages: &[Passage], path: &Path) -> Result<()> {
    let index = passage_index(passages);
    let mut order: Vec<&str> = Vec::new();
    let mut by_pid: HashMap<&str, Vec<SquadQaOut>> = HashMap::new();
    for (i, ex) in examples.iter().enumerate() {
        let p = index
            .get(ex.passage_id.as_str())
            .ok_or_else(|| Error::contract(format!("unknown passage {}", ex.passage_id)))?;
        let (b, _) = p.byte_range(ex.answer.start, ex.answer.end)?;
        let qas = by_pid.entry(ex.passage_id.as_str()).or_insert_with(|| {
            order.push(ex.passage_id.as_str());
            Vec::new()
        });
        qas.push(SquadQaOut {
            id: format!("{}-syn{i}", ex.passage_id),
            question: &ex.question,
            answers: vec![SquadAnswerOut {
                text: &ex.answer_text,
                answer_start: p.char_index(b),
            }],
        });
    }
    let data = order
        .into_iter()
        .map(|pid| SquadArticleOut {
            title: pid,
            paragraphs: vec![SquadParagraphOut {
                context: &index[pid].text,
                qas: by_pid.remove(pid).unwrap_or_default(),
            }],
        })
        .collect();
    let body = serde_json::to_string(&SquadOut {
        version: "1.1",
        data,
    })
    .expect("squad output serializes");
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Generator finetuning set: masked passage plus answer as source, question
/// as target.
pub fn write_qg_finetune(examples: &[SyntheticExample], passages: &[Passage], path: &Path) -> Result<()> {
    let index = passage_index(passages);
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for ex in examples {
        let p = index
            .get(ex.passage_id.as_str())
            .ok_or_else(|| Error::contract(format!("unknown passage {}", ex.passage_id)))?;
        let masked = mask_passage(p, &ex.answer)?;
        let pair = QgPair {
            source: qg_source(&masked.text, &masked.entity_text),
            target: ex.question.clone(),
        };
        serde_json::to_writer(&mut w, &pair).expect("pair serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_report(report: &[PassageSelection], path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in report {
        serde_json::to_writer(&mut w, r).expect("report serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn wait_for_job<B: ScoringBackend + ?Sized>(backend: &B, job_id: &str, config: &LoopConfig) -> Result<()> {
    for poll in 0..=config.max_polls {
        match backend.finetune_status(job_id)? {
            JobStatus::Done => return Ok(()),
            JobStatus::Failed => return Err(Error::Job(format!("job {job_id} failed"))),
            JobStatus::Pending if poll < config.max_polls => {
                std::thread::sleep(Duration::from_millis(config.poll_interval_ms));
            }
            JobStatus::Pending => {}
        }
    }
    Err(Error::Job(format!("job {job_id} still pending after {} polls", config.max_polls)))
}

/// Diagnostics for a selection: bucket counts, question statistics, and hit
/// rate / BLEU when gold answers are available.
pub fn diagnostics(
    labeled: &[SyntheticExample],
    selected: &[SyntheticExample],
    gold: &[GoldQA],
) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    m.insert("synthesized".into(), labeled.len() as f64);
    m.insert("selected".into(), selected.len() as f64);
    for (name, b) in [
        ("simple", Bucket::Simple),
        ("challenging", Bucket::Challenging),
        ("difficult", Bucket::Difficult),
    ] {
        let n = labeled.iter().filter(|e| e.bucket == Some(b)).count();
        m.insert(format!("bucket.{name}"), n as f64);
    }
    let qs: Vec<&str> = selected.iter().map(|e| e.question.as_str()).collect();
    let st = question_stats(&qs);
    m.insert("question.mean_len".into(), st.mean_len);
    m.insert("question.std_len".into(), st.std_len);
    m.insert("question.distinct_vocab".into(), st.distinct_vocab as f64);
    m.insert("question.total_tokens".into(), st.total_tokens as f64);
    if !gold.is_empty() {
        let hr = hit_rate(selected, gold);
        m.insert("hit_rate".into(), hr.rate);
        m.insert("hit_rate.n".into(), hr.n as f64);
        let pairing = pair_for_bleu(selected, gold);
        let bleu = corpus_bleu(&pairing.candidates, &pairing.references).unwrap_or(0.0);
        m.insert("bleu".into(), bleu);
        m.insert("bleu.matched".into(), pairing.candidates.len() as f64);
        m.insert("bleu.unmatched".into(), pairing.unmatched as f64);
    }
    m
}

/// Run one synthesize → select → finetune cycle and return the next state.
/// The new state is also saved to `<out_dir>/state.json`.
pub fn run_iteration<B: ScoringBackend + ?Sized>(
    state: &LoopState,
    passages: &[Passage],
    gold: &[GoldQA],
    backend: &B,
    config: &LoopConfig,
) -> Result<LoopState> {
    if passages.is_empty() {
        return Err(Error::contract("self-training needs at least one passage"));
    }
    config.synth.aer.validate()?;
    let next = state.iteration + 1;
    let dir = config.out_dir.join(format!("iter-{next}"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let ids: HashSet<&str> = passages.iter().map(|p| p.id.as_str()).collect();
    let gold: Vec<GoldQA> = gold.iter().filter(|g| ids.contains(g.passage_id.as_str())).cloned().collect();

    let synth = synthesize_corpus(backend, passages, &config.synth);
    log::info!(
        "iteration {next}: {} examples from {} passages ({} failed, {} candidates dropped)",
        synth.examples.len(),
        passages.len(),
        synth.failed_passages.len(),
        synth.dropped_candidates
    );
    let selection = bucket_and_select(&synth.examples, &config.selection)?;

    let source = format!("rgx-iter-{next}");
    let synthetic_path = dir.join("synthetic.jsonl");
    let selected_path = dir.join("selected.jsonl");
    let report_path = dir.join("selection_report.jsonl");
    let qae_path = dir.join("qae_finetune.json");
    let qg_path = dir.join("qg_finetune.jsonl");
    write_synthetic(&selection.labeled, &source, &synthetic_path)?;
    write_synthetic(&selection.selected, &source, &selected_path)?;
    write_report(&selection.report, &report_path)?;
    write_qae_finetune(&selection.selected, passages, &qae_path)?;
    write_qg_finetune(&selection.selected, passages, &qg_path)?;

    let mut metrics = diagnostics(&selection.labeled, &selection.selected, &gold);
    metrics.insert("failed_passages".into(), synth.failed_passages.len() as f64);
    metrics.insert("dropped_candidates".into(), synth.dropped_candidates as f64);

    let mut new_state = LoopState {
        schema_version: STATE_SCHEMA_VERSION,
        iteration: next,
        synthetic_dataset_path: Some(synthetic_path),
        selection_report_path: Some(report_path),
        qae_finetune_path: Some(qae_path.clone()),
        qg_finetune_path: Some(qg_path.clone()),
        qg_model_ref: state.qg_model_ref.clone(),
        qae_model_ref: state.qae_model_ref.clone(),
        metrics_snapshot: metrics,
    };
    // files are already on disk, so a rejected job can be resubmitted later
    let qae_job = backend.finetune_submit(ModelKind::Qae, &qae_path)?;
    let qg_job = backend.finetune_submit(ModelKind::Qg, &qg_path)?;
    wait_for_job(backend, &qae_job, config)?;
    wait_for_job(backend, &qg_job, config)?;
    new_state.qae_model_ref = qae_job;
    new_state.qg_model_ref = qg_job;

    if config.resynthesize.unwrap_or_else(|| backend.is_remote()) {
        let again = synthesize_corpus(backend, passages, &config.synth);
        let sel = bucket_and_select(&again.examples, &config.selection)?;
        let path = dir.join("resynthesized.jsonl");
        write_synthetic(&sel.labeled, &format!("{source}-resynth"), &path)?;
        let rpath = dir.join("resynthesized_report.jsonl");
        write_report(&sel.report, &rpath)?;
        for (k, v) in diagnostics(&sel.labeled, &sel.selected, &gold) {
            new_state.metrics_snapshot.insert(format!("resynth.{k}"), v);
        }
        new_state.synthetic_dataset_path = Some(path);
        new_state.selection_report_path = Some(rpath);
    }

    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    new_state.save(config.out_dir.join(STATE_FILE))?;
    Ok(new_state)
}

//! `rgx`: batch front end for QA data synthesis, selection, reranking and
//! self-training.
//!
//! Exit codes: 0 success, 1 contract or data error, 2 backend transport
//! error, 64 usage error.

mod config;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use rgx_core::backends::ScoringBackend;
use rgx_core::corpus::{load_corpus, read_synthetic, read_synthetic_with_source, sample_passages, write_synthetic, Corpus, DEFAULT_SAMPLE_SIZE};
use rgx_core::emselect::bucket_and_select;
use rgx_core::looper::{diagnostics, resume, run_iteration, LoopState, STATE_FILE};
use rgx_core::metrics::{evaluate, question_stats, QuestionStats};
use rgx_core::mmi::{answer_with_mmi, passage_answer_spans};
use rgx_core::synth::{synthesize_corpus, AerStrategy};
use rgx_core::{Error, Passage};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "rgx", version, about = "Synthesize, select and evaluate extractive QA training data")]
struct Cli {
    /// JSON run configuration; flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for sampling and mock backends (required where randomness is involved)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// mock:echo, mock:planted[:NOISE], mock:random[:SEED], remote[:URL] or a URL;
    /// defaults to RGX_BACKEND_URL
    #[arg(long, global = true)]
    backend: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus to synthetic QA pairs (JSONL)
    Synthesize {
        /// SQuAD v1.1 JSON, or MRQA JSONL (optionally .gz)
        #[arg(long)]
        corpus: PathBuf,
        /// Synthetic pairs (JSONL, header line first)
        #[arg(long)]
        out: PathBuf,
        /// Sample this many passages (default: all)
        #[arg(long)]
        passages: Option<usize>,
        /// all, lm or coop
        #[arg(long)]
        strategy: Option<AerStrategy>,
    },
    /// Bucket synthetic pairs by extractor loss and keep simple and challenging ones
    Select {
        /// Synthetic pairs from `synthesize`
        #[arg(long)]
        input: PathBuf,
        /// Selected pairs (JSONL)
        #[arg(long)]
        out: PathBuf,
        /// Per-passage selection report (JSONL)
        #[arg(long)]
        report: Option<PathBuf>,
        /// Every input pair with its bucket
        #[arg(long)]
        labeled: Option<PathBuf>,
    },
    /// Answer an evaluation set with MMI reranking
    Rerank {
        /// Evaluation set, SQuAD or MRQA
        #[arg(long)]
        corpus: PathBuf,
        /// Predictions as a JSON object of question id to answer text
        #[arg(long)]
        out: PathBuf,
        /// Per-question details (JSONL)
        #[arg(long)]
        details: Option<PathBuf>,
    },
    /// Score predictions against gold answers (EM and F1)
    Evaluate {
        /// JSON object of question id to answer text
        #[arg(long)]
        pred: PathBuf,
        /// Gold set, SQuAD or MRQA
        #[arg(long)]
        gold: PathBuf,
        /// Write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
        /// Include per-question scores
        #[arg(long)]
        per_example: bool,
    },
    /// Run synthesis, selection and finetuning rounds
    Selftrain {
        /// SQuAD v1.1 JSON, or MRQA JSONL (optionally .gz)
        #[arg(long)]
        corpus: PathBuf,
        /// Iteration files and state.json go here
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SAMPLE_SIZE)]
        passages: usize,
        /// Rounds to run (default: config `iterations`)
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from <out-dir>/state.json when present
        #[arg(long)]
        resume: bool,
    },
    /// Question statistics for synthetic and annotated data
    Stats {
        /// Synthetic pairs to describe
        #[arg(long)]
        synthetic: Option<PathBuf>,
        /// Annotated corpus to describe
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `rgx --help` for usage.");
            ExitCode::from(64)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_transport() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.backend.is_some() {
        cfg.backend = cli.backend.clone();
    }
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::contract(e.to_string()))?;
    }
    let seed = || cfg.seed.ok_or_else(|| Failure::Usage("--seed is required for this command".into()));

    match cli.command {
        Command::Synthesize {
            corpus,
            out,
            passages,
            strategy,
        } => {
            let seed = seed()?;
            if let Some(s) = strategy {
                cfg.strategy = s;
            }
            let corpus = load_corpus(&corpus)?;
            let passages = match passages {
                Some(n) => sample_passages(&corpus, n, seed),
                None => corpus.passages.clone(),
            };
            let backend = build_backend(&cfg, seed, &corpus, &passages)?;
            let report = synthesize_corpus(&backend, &passages, &cfg.synth());
            if !report.failed_passages.is_empty() {
                log::warn!("{} passages failed", report.failed_passages.len());
            }
            write_synthetic(&report.examples, &corpus.source_name, &out)?;
            log::info!("wrote {} examples from {} passages to {}", report.examples.len(), passages.len(), out.display());
        }
        Command::Select {
            input,
            out,
            report,
            labeled,
        } => {
            let (examples, source) = read_synthetic_with_source(&input)?;
            let sel = bucket_and_select(&examples, &cfg.selection)?;
            write_synthetic(&sel.selected, &source, &out)?;
            if let Some(p) = labeled {
                write_synthetic(&sel.labeled, &source, &p)?;
            }
            if let Some(p) = report {
                write_jsonl(&p, &sel.report)?;
            }
            log::info!("selected {} of {} examples", sel.selected.len(), examples.len());
        }
        Command::Rerank { corpus, out, details } => {
            let seed = seed()?;
            let corpus = load_corpus(&corpus)?;
            let backend = build_backend(&cfg, seed, &corpus, &corpus.passages)?;
            let rows = rerank(&backend, &corpus, &cfg)?;
            let preds: BTreeMap<&str, &str> = rows.iter().map(|r| (r.id.as_str(), r.answer.as_str())).collect();
            write_json(Some(&out), &preds)?;
            if let Some(p) = details {
                write_jsonl(&p, &rows)?;
            }
            log::info!("answered {} of {} questions", rows.len(), corpus.qa_pairs.len());
        }
        Command::Evaluate {
            pred,
            gold,
            out,
            per_example,
        } => {
            let body = std::fs::read_to_string(&pred).map_err(|e| Error::io(&pred, e))?;
            let preds: HashMap<String, String> = serde_json::from_str(&body).map_err(|e| Error::Format {
                path: pred.clone(),
                location: format!("line {} column {}", e.line(), e.column()),
                message: e.to_string(),
            })?;
            let gold = load_corpus(&gold)?;
            let report = evaluate(&preds, &gold.qa_pairs, per_example)?;
            write_json(out.as_deref(), &report)?;
        }
        Command::Selftrain {
            corpus,
            out_dir,
            passages,
            iterations,
            resume: resume_flag,
        } => {
            let seed = seed()?;
            let corpus = load_corpus(&corpus)?;
            let sampled = sample_passages(&corpus, passages, seed);
            let ids: HashSet<&str> = sampled.iter().map(|p| p.id.as_str()).collect();
            let gold = corpus.gold_for(&ids);
            let backend = build_backend(&cfg, seed, &corpus, &sampled)?;
            let loop_cfg = cfg.loop_config(&out_dir);
            let state_path = out_dir.join(STATE_FILE);
            let mut state = if resume_flag && state_path.exists() {
                resume(&state_path)?
            } else {
                LoopState::initial("base", "base")
            };
            for _ in 0..iterations.unwrap_or(cfg.iterations) {
                state = run_iteration(&state, &sampled, &gold, &backend, &loop_cfg)?;
                log::info!("iteration {} done", state.iteration);
            }
            write_json(None, &state.metrics_snapshot)?;
        }
        Command::Stats { synthetic, corpus, out } => {
            if synthetic.is_none() && corpus.is_none() {
                return Err(Failure::Usage("stats needs --synthetic and/or --corpus".into()));
            }
            let corpus = corpus.map(|p| load_corpus(&p)).transpose()?;
            let mut report = StatsReport::default();
            if let Some(c) = &corpus {
                let qs: Vec<&str> = c.qa_pairs.iter().map(|q| q.question.as_str()).collect();
                report.annotated = Some(question_stats(&qs));
            }
            if let Some(p) = synthetic {
                let examples = read_synthetic(&p)?;
                let gold = corpus.as_ref().map(|c| c.qa_pairs.as_slice()).unwrap_or(&[]);
                report.synthetic = Some(diagnostics(&examples, &examples, gold));
            }
            write_json(out.as_deref(), &report)?;
        }
    }
    Ok(())
}

#[derive(Serialize, Default)]
struct StatsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    annotated: Option<QuestionStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic: Option<BTreeMap<String, f64>>,
}

#[derive(Serialize)]
struct RerankRow {
    id: String,
    answer: String,
    token_start: usize,
    token_end: usize,
    extractor_top: String,
    candidates: usize,
}

fn build_backend(
    cfg: &RunConfig,
    seed: u64,
    corpus: &Corpus,
    passages: &[Passage],
) -> CliResult<rgx_core::BackendHandle> {
    let ids: HashSet<&str> = passages.iter().map(|p| p.id.as_str()).collect();
    let entities: Vec<&str> = corpus
        .qa_pairs
        .iter()
        .filter(|q| ids.contains(q.passage_id.as_str()))
        .map(|q| q.answer_text.as_str())
        .collect();
    let backend = cfg.backend(seed, &entities).map_err(|e| Failure::Usage(e.to_string()))?;
    let health = backend.health()?;
    log::info!("backend status {}", health.status);
    Ok(backend)
}

fn rerank<B: ScoringBackend + ?Sized>(backend: &B, corpus: &Corpus, cfg: &RunConfig) -> CliResult<Vec<RerankRow>> {
    let per_passage: Vec<rgx_core::Result<Vec<RerankRow>>> = corpus
        .passages
        .par_iter()
        .map(|p| {
            let questions: Vec<_> = corpus.qa_pairs.iter().filter(|q| q.passage_id == p.id).collect();
            if questions.is_empty() {
                return Ok(Vec::new());
            }
            let spans = passage_answer_spans(backend, p, &cfg.aer)?;
            let mut rows = Vec::new();
            for q in questions {
                match answer_with_mmi(backend, p, &q.question, &spans, cfg.aer.l_span, &cfg.mmi) {
                    Ok(pred) => rows.push(RerankRow {
                        id: q.id.clone(),
                        answer: pred.answer_text,
                        token_start: pred.answer.start,
                        token_end: pred.answer.end,
                        extractor_top: p.span_text(pred.qae_top.start, pred.qae_top.end)?.to_string(),
                        candidates: pred.candidates,
                    }),
                    Err(e) if e.is_transport() => return Err(e),
                    Err(e) => log::warn!("question {} skipped: {e}", q.id),
                }
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for (p, r) in corpus.passages.iter().zip(per_passage) {
        match r {
            Ok(mut v) => rows.append(&mut v),
            Err(e) if e.is_transport() => return Err(e.into()),
            Err(e) => log::warn!("passage {} skipped: {e}", p.id),
        }
    }
    Ok(rows)
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> CliResult<()> {
    let body = serde_json::to_string_pretty(value).expect("output serializes") + "\n";
    match path {
        Some(p) => std::fs::write(p, body).map_err(|e| Error::io(p, e))?,
        None => std::io::stdout()
            .write_all(body.as_bytes())
            .map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut body = String::new();
    for r in rows {
        body.push_str(&serde_json::to_string(r).expect("row serializes"));
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
    Ok(())
}

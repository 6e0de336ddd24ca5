//! Self-training data synthesis for extractive question answering.
//!
//! The pipeline recognises candidate answer entities in a passage, masks
//! each one, asks a question generator about it, and lets an extractive QA
//! model re-locate the answer. The resulting pairs are bucketed by extractor
//! loss with a three-component mixture, and the simple and challenging ones
//! are used to finetune both generator and extractor. At test time answers
//! can be reranked by maximum mutual information between the two models.
//!
//! All neural scoring goes through [`backends::ScoringBackend`], so every
//! algorithm here runs deterministically against [`backends::MockBackend`].

pub mod backends;
pub mod corpus;
pub mod emselect;
pub mod error;
pub mod looper;
pub mod metrics;
pub mod mmi;
pub mod plantgen;
pub mod qaecore;
pub mod spanops;
pub mod synth;
pub mod tokenize;

pub use backends::{BackendHandle, BackendSpec, MockBackend, RemoteBackend, RetryPolicy, ScoringBackend};
pub use corpus::{Corpus, GoldQA, Passage};
pub use emselect::{EmConfig, MixtureModel1D, SelectionPolicy};
pub use error::{Error, Result};
pub use looper::{LoopConfig, LoopState};
pub use metrics::EvalReport;
pub use mmi::{MmiCandidate, MmiConfig};
pub use qaecore::LogitPair;
pub use spanops::{AerConfig, ScoredSpan};
pub use synth::{AerStrategy, Bucket, SynthConfig, SyntheticExample};

//! JSON run configuration. Command-line flags override file values.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use rgx_core::backends::{BackendHandle, BackendSpec, MockBackend, RemoteBackend, RetryPolicy};
use rgx_core::emselect::SelectionPolicy;
use rgx_core::looper::LoopConfig;
use rgx_core::mmi::MmiConfig;
use rgx_core::spanops::AerConfig;
use rgx_core::synth::{AerStrategy, SynthConfig};
use rgx_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub backend: Option<String>,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub aer: AerConfig,
    pub strategy: AerStrategy,
    pub mmi: MmiConfig,
    pub selection: SelectionPolicy,
    pub iterations: usize,
    pub resynthesize: Option<bool>,
    pub poll_interval_ms: u64,
    pub max_polls: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lp = LoopConfig::default();
        Self {
            seed: None,
            backend: None,
            timeout_ms: 30_000,
            retry: RetryPolicy::default(),
            max_in_flight: 16,
            aer: AerConfig::default(),
            strategy: AerStrategy::default(),
            mmi: MmiConfig::default(),
            selection: SelectionPolicy::default(),
            iterations: 1,
            resynthesize: lp.resynthesize,
            poll_interval_ms: lp.poll_interval_ms,
            max_polls: lp.max_polls,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut de = serde_json::Deserializer::from_str(&body);
        serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            location: e.path().to_string(),
            message: e.into_inner().to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.aer.validate()?;
        if self.selection.em.k == 0 || self.selection.em.max_iter == 0 {
            return Err(Error::contract("selection needs k >= 1 and max_iter >= 1"));
        }
        if !(self.mmi.alpha_floor > 0.0 && self.mmi.alpha_floor <= 1.0) || !(self.mmi.beta >= 0.0) {
            return Err(Error::contract("mmi needs 0 < alpha_floor <= 1 and beta >= 0"));
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            aer: self.aer.clone(),
            strategy: self.strategy,
        }
    }

    pub fn loop_config(&self, out_dir: &Path) -> LoopConfig {
        LoopConfig {
            synth: self.synth(),
            selection: self.selection.clone(),
            out_dir: out_dir.to_path_buf(),
            resynthesize: self.resynthesize,
            poll_interval_ms: self.poll_interval_ms,
            max_polls: self.max_polls,
        }
    }

    /// Build the backend. Planted mocks are keyed to `entities`, normally
    /// the gold answers of the input corpus.
    pub fn backend(&self, seed: u64, entities: &[&str]) -> Result<BackendHandle> {
        let spec = match &self.backend {
            Some(s) => s.parse::<BackendSpec>()?,
            None => "remote".parse::<BackendSpec>()?,
        };
        Ok(match spec {
            BackendSpec::Echo => BackendHandle::Mock(MockBackend::echo()),
            BackendSpec::Planted { noise } => BackendHandle::Mock(MockBackend::planted(entities, noise, seed)),
            // a bare `mock:random` follows --seed
            BackendSpec::Random { seed: s } => {
                let explicit = self.backend.as_deref().is_some_and(|b| b.matches(':').count() == 2);
                BackendHandle::Mock(MockBackend::random(if explicit { s } else { seed }))
            }
            BackendSpec::Remote { endpoint } => BackendHandle::Remote(RemoteBackend::new(
                endpoint,
                Duration::from_millis(self.timeout_ms),
                self.retry,
                self.max_in_flight,
            )),
        })
    }
}

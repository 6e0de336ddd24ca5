//! Three-way bucketing of synthetic QA pairs by extractor loss.
//!
//! A univariate Gaussian mixture is fitted to the losses with EM. After
//! fitting, components are ordered by mean, so component 0 holds the
//! low-loss (simple) pairs, 1 the medium-loss (challenging) ones and 2 the
//! high-loss (difficult) ones. Difficult pairs are dropped from training.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Bucket, SyntheticExample};

pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel1D {
    pub k: usize,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub weights: Vec<f64>,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub k: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub variance_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            k: 3,
            tol: 1e-6,
            max_iter: 200,
            variance_floor: VARIANCE_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub model: MixtureModel1D,
    /// Max-responsibility component per input value (ties to the lower index).
    pub assignments: Vec<usize>,
    /// E+M steps performed.
    pub iterations: usize,
    /// Log-likelihood at initialisation followed by one entry per step.
    pub trace: Vec<f64>,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean).powi(2) / var)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl MixtureModel1D {
    /// Per-point component log joint densities `log w_c + log N(x | c)`.
    fn log_joint(&self, x: f64, out: &mut [f64]) {
        for c in 0..self.k {
            out[c] = if self.weights[c] > 0.0 {
                self.weights[c].ln() + log_normal(x, self.means[c], self.variances[c])
            } else {
                f64::NEG_INFINITY
            };
        }
    }

    pub fn total_log_likelihood(&self, xs: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.k];
        xs.iter()
            .map(|&x| {
                self.log_joint(x, &mut buf);
                log_sum_exp(&buf)
            })
            .sum()
    }

    /// Component with the highest responsibility for `x`.
    pub fn assign(&self, x: f64) -> usize {
        let mut buf = vec![0.0; self.k];
        self.log_joint(x, &mut buf);
        let mut best = 0;
        for c in 1..self.k {
            if buf[c] > buf[best] {
                best = c;
            }
        }
        best
    }
}

/// Start means at the (2c+1)/(2k) quantiles (1/6, 3/6, 5/6 for k = 3).
fn quantile_means(sorted: &[f64], k: usize) -> Vec<f64> {
    (0..k).map(|c| quantile(sorted, (2 * c + 1) as f64 / (2 * k) as f64)).collect()
}

/// Start means at the group means after cutting the sorted losses at their
/// `k - 1` widest gaps.
fn gap_means(sorted: &[f64], k: usize) -> Vec<f64> {
    let mut gaps: Vec<usize> = (1..sorted.len()).collect();
    gaps.sort_by(|&a, &b| (sorted[b] - sorted[b - 1]).total_cmp(&(sorted[a] - sorted[a - 1])).then(a.cmp(&b)));
    let mut cuts: Vec<usize> = gaps.into_iter().take(k - 1).collect();
    cuts.sort_unstable();
    cuts.push(sorted.len());
    let mut lo = 0;
    cuts.into_iter()
        .map(|hi| {
            let g = &sorted[lo..hi];
            lo = hi;
            g.iter().sum::<f64>() / g.len() as f64
        })
        .collect()
}

/// Equal weights and, for every component, the pooled within-group variance
/// with each loss grouped under its nearest start mean.
fn initial_model(losses: &[f64], means: Vec<f64>, floor: f64) -> MixtureModel1D {
    let k = means.len();
    let pooled = (losses
        .iter()
        .map(|&x| means.iter().map(|m| (x - m).powi(2)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / losses.len() as f64)
        .max(floor);
    let mut model = MixtureModel1D {
        k,
        means,
        variances: vec![pooled; k],
        weights: vec![1.0 / k as f64; k],
        log_likelihood: 0.0,
    };
    model.log_likelihood = model.total_log_likelihood(losses);
    model
}

/// EM from `model` until the gain drops below `tol` or `max_iter` steps.
/// Returns the step count and the log-likelihood trace.
fn run_em(losses: &[f64], model: &mut MixtureModel1D, config: &EmConfig) -> (usize, Vec<f64>) {
    let k = model.k;
    let n = losses.len() as f64;
    let mut trace = vec![model.log_likelihood];
    let mut resp = vec![0.0; losses.len() * k];
    let mut buf = vec![0.0; k];
    let mut iterations = 0;
    while iterations < config.max_iter {
        // E step
        for (i, &x) in losses.iter().enumerate() {
            model.log_joint(x, &mut buf);
            let lse = log_sum_exp(&buf);
            for c in 0..k {
                resp[i * k + c] = (buf[c] - lse).exp();
            }
        }
        // M step
        for c in 0..k {
            let nk: f64 = (0..losses.len()).map(|i| resp[i * k + c]).sum();
            model.weights[c] = nk / n;
            if nk <= f64::MIN_POSITIVE {
                // empty component: parameters are irrelevant to the likelihood
                continue;
            }
            let mu = losses.iter().enumerate().map(|(i, x)| resp[i * k + c] * x).sum::<f64>() / nk;
            let var = losses
                .iter()
                .enumerate()
                .map(|(i, x)| resp[i * k + c] * (x - mu).powi(2))
                .sum::<f64>()
                / nk;
            model.means[c] = mu;
            model.variances[c] = var.max(config.variance_floor);
        }
        let wsum: f64 = model.weights.iter().sum();
        model.weights.iter_mut().for_each(|w| *w /= wsum);
        iterations += 1;

        let ll = model.total_log_likelihood(losses);
        let gain = ll - model.log_likelihood;
        model.log_likelihood = ll;
        trace.push(ll);
        if gain < config.tol {
            break;
        }
    }
    (iterations, trace)
}

/// Fit a `k`-component Gaussian mixture to `losses` with EM.
///
/// EM runs from two deterministic starts: means at the 1/6, 3/6, 5/6
/// quantiles (for k = 3), and means of the groups left after cutting the
/// sorted losses at their widest gaps. The fit with the higher final
/// log-likelihood is kept, the quantile start on ties. Both starts use equal
/// weights and the pooled within-group variance. Iteration stops once the
/// log-likelihood gain drops below `tol` or after `max_iter` steps.
pub fn fit_em_1d(losses: &[f64], config: &EmConfig) -> Result<EmFit> {
    let k = config.k;
    if k == 0 {
        return Err(Error::contract("mixture needs at least one component"));
    }
    if losses.len() < k {
        return Err(Error::InsufficientData {
            needed: k,
            got: losses.len(),
        });
    }
    if let Some(bad) = losses.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::contract(format!("loss values must be finite and >= 0, got {bad}")));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut model = initial_model(losses, quantile_means(&sorted, k), config.variance_floor);
    let (mut iterations, mut trace) = run_em(losses, &mut model, config);
    let mut alt = initial_model(losses, gap_means(&sorted, k), config.variance_floor);
    let (alt_iterations, alt_trace) = run_em(losses, &mut alt, config);
    if alt.log_likelihood > model.log_likelihood {
        model = alt;
        iterations = alt_iterations;
        trace = alt_trace;
    }

    // relabel ascending by mean; stable so equal means keep their order
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| model.means[a].total_cmp(&model.means[b]));
    let model = MixtureModel1D {
        k,
        means: order.iter().map(|&c| model.means[c]).collect(),
        variances: order.iter().map(|&c| model.variances[c]).collect(),
        weights: order.iter().map(|&c| model.weights[c]).collect(),
        log_likelihood: model.log_likelihood,
    };
    let assignments = losses.iter().map(|&x| model.assign(x)).collect();
    Ok(EmFit {
        model,
        assignments,
        iterations,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionPolicy {
    pub em: EmConfig,
    /// A passage with fewer examples than this uses the pooled fit.
    pub min_per_passage: usize,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self {
            em: EmConfig::default(),
            min_per_passage: 6,
        }
    }
}

/// One line of the selection report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageSelection {
    pub passage_id: String,
    /// `passage`, `pooled`, or `none` when even the pooled fit was impossible.
    pub fit: String,
    pub means: Vec<f64>,
    pub weights: Vec<f64>,
    pub simple: usize,
    pub challenging: usize,
    pub difficult: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Selection {
    /// Simple and challenging examples, in input order.
    pub selected: Vec<SyntheticExample>,
    /// Every input example with its bucket set, in input order.
    pub labeled: Vec<SyntheticExample>,
    pub report: Vec<PassageSelection>,
}

/// Label every example and keep the simple and challenging ones.
///
/// Passages with at least `min_per_passage` examples get their own fit; the
/// rest are labeled by a single fit over the whole batch. When the batch is
/// smaller than the component count, everything is labeled simple.
pub fn bucket_and_select(examples: &[SyntheticExample], policy: &SelectionPolicy) -> Result<Selection> {
    if examples.is_empty() {
        return Ok(Selection::default());
    }
    let losses: Vec<f64> = examples
        .iter()
        .map(|e| {
            e.qae_loss.ok_or_else(|| {
                Error::contract(format!("example in passage {} has no extractor loss", e.passage_id))
            })
        })
        .collect::<Result<_>>()?;

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut first_seen: Vec<&str> = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        let g = groups.entry(e.passage_id.as_str()).or_default();
        if g.is_empty() {
            first_seen.push(e.passage_id.as_str());
        }
        g.push(i);
    }

    let needs_pooled = groups.values().any(|g| g.len() < policy.min_per_passage);
    let pooled = if needs_pooled {
        match fit_em_1d(&losses, &policy.em) {
            Ok(f) => Some(f.model),
            Err(Error::InsufficientData { .. }) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let fits: Vec<(&str, Result<(String, Option<MixtureModel1D>, Vec<usize>)>)> = first_seen
        .par_iter()
        .map(|&pid| {
            let idx = &groups[pid];
            let local: Vec<f64> = idx.iter().map(|&i| losses[i]).collect();
            let r = if idx.len() >= policy.min_per_passage {
                fit_em_1d(&local, &policy.em).map(|f| ("passage".to_string(), Some(f.model), f.assignments))
            } else if let Some(m) = &pooled {
                Ok(("pooled".to_string(), Some(m.clone()), local.iter().map(|&x| m.assign(x)).collect()))
            } else {
                Ok(("none".to_string(), None, vec![0; local.len()]))
            };
            (pid, r)
        })
        .collect();

    let mut buckets = vec![Bucket::Simple; examples.len()];
    let mut report = Vec::with_capacity(fits.len());
    for (pid, r) in fits {
        let (fit, model, assign) = r?;
        let idx = &groups[pid];
        let mut counts = [0usize; 3];
        for (&i, &c) in idx.iter().zip(&assign) {
            let b = Bucket::from_component(c);
            buckets[i] = b;
            counts[b as usize] += 1;
        }
        report.push(PassageSelection {
            passage_id: pid.to_string(),
            fit,
            means: model.as_ref().map(|m| m.means.clone()).unwrap_or_default(),
            weights: model.map(|m| m.weights).unwrap_or_default(),
            simple: counts[0],
            challenging: counts[1],
            difficult: counts[2],
        });
    }

    let labeled: Vec<SyntheticExample> = examples
        .iter()
        .zip(&buckets)
        .map(|(e, &b)| SyntheticExample {
            bucket: Some(b),
            ..e.clone()
        })
        .collect();
    let selected = labeled
        .iter()
        .filter(|e| e.bucket.is_some_and(Bucket::is_selected))
        .cloned()
        .collect();
    Ok(Selection {
        selected,
        labeled,
        report,
    })
}

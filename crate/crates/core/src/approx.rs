//! Token sub-sampling and approximation-fidelity bookkeeping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diagnostics::{pearson, CorrelationResult};
use crate::error::{arg, Result};
use crate::ingest::ActivationBatch;
use crate::metrics::MetricRecord;

const EPS: f64 = 1e-12;

/// A seeded uniform subset of token rows, drawn without replacement.
///
/// Selection is a partial Fisher–Yates shuffle of `0..n` driven by
/// `ChaCha8Rng::seed_from_u64(seed)`, followed by an ascending sort, so
/// plans are reproducible across runs and platforms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingPlan {
    fraction_bits: u64,
    pub seed: u64,
    pub n: usize,
    row_indices: Vec<usize>,
}

impl SamplingPlan {
    pub fn fraction(&self) -> f64 {
        f64::from_bits(self.fraction_bits)
    }

    /// Selected rows, ascending.
    pub fn row_indices(&self) -> &[usize] {
        &self.row_indices
    }

    pub fn len(&self) -> usize {
        self.row_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_indices.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.row_indices.len() == self.n
    }
}

/// Number of rows a plan keeps: `max(2, round(fraction·n))`, at most `n`.
pub fn sample_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).max(2).min(n)
}

pub fn make_plan(n: usize, fraction: f64, seed: u64) -> Result<SamplingPlan> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(arg(format!(
            "sampling fraction must be in (0, 1], got {fraction}"
        )));
    }
    if n < 2 {
        return Err(arg(format!(
            "need at least 2 tokens to sample from, got {n}"
        )));
    }
    let count = sample_count(n, fraction);
    let mut rows: Vec<usize> = (0..n).collect();
    if count < n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (chosen, _) = rows.partial_shuffle(&mut rng, count);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        rows = chosen;
    }
    Ok(SamplingPlan {
        fraction_bits: fraction.to_bits(),
        seed,
        n,
        row_indices: rows,
    })
}

/// Rows of `batch` selected by `plan`, ascending.
pub fn apply_plan(batch: &ActivationBatch, plan: &SamplingPlan) -> Result<ActivationBatch> {
    if let Some(&bad) = plan.row_indices.iter().find(|&&r| r >= batch.n_rows()) {
        return Err(arg(format!(
            "plan index {bad} out of range for batch with {} rows",
            batch.n_rows()
        )));
    }
    if plan.is_identity() && plan.n == batch.n_rows() {
        return Ok(batch.clone());
    }
    batch.select_rows(&plan.row_indices)
}

/// Percent errors of an approximate run's metrics against the exact run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FidelityReport {
    pub layer: u32,
    pub step: u64,
    pub se_pre: f64,
    pub se_post: f64,
    pub pr_pre: f64,
    pub pr_post: f64,
    pub eee_pre: f64,
    pub eee_post: f64,
    pub js: f64,
}

/// Metrics covered by a [`FidelityReport`].
pub const FIDELITY_METRICS: [&str; 7] = [
    "se_pre", "se_post", "pr_pre", "pr_post", "eee_pre", "eee_post", "js",
];

impl FidelityReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "se_pre" => self.se_pre,
            "se_post" => self.se_post,
            "pr_pre" => self.pr_pre,
            "pr_post" => self.pr_post,
            "eee_pre" => self.eee_pre,
            "eee_post" => self.eee_post,
            "js" => self.js,
            _ => return None,
        })
    }
}

pub fn percent_error(exact: f64, approx: f64) -> f64 {
    100.0 * (approx - exact).abs() / exact.abs().max(EPS)
}

pub fn fidelity_report(exact: &MetricRecord, approx: &MetricRecord) -> Result<FidelityReport> {
    if exact.layer != approx.layer || exact.step != approx.step {
        return Err(arg(format!(
            "records are for different cells: (layer {}, step {}) vs (layer {}, step {})",
            exact.layer, exact.step, approx.layer, approx.step
        )));
    }
    let pe = |f: fn(&MetricRecord) -> f64| percent_error(f(exact), f(approx));
    Ok(FidelityReport {
        layer: exact.layer,
        step: exact.step,
        se_pre: pe(|r| r.se_pre),
        se_post: pe(|r| r.se_post),
        pr_pre: pe(|r| r.pr_pre),
        pr_post: pe(|r| r.pr_post),
        eee_pre: pe(|r| r.eee_pre),
        eee_post: pe(|r| r.eee_post),
        js: pe(|r| r.js),
    })
}

/// Pearson correlation of `(metric, loss)` pairs for the exact and the
/// approximate series, side by side. Reports only; never judges.
pub fn correlation_fidelity(
    exact_series: &[(f64, f64)],
    approx_series: &[(f64, f64)],
) -> Result<(CorrelationResult, CorrelationResult)> {
    if exact_series.len() != approx_series.len() {
        return Err(arg(format!(
            "series lengths differ: {} vs {}",
            exact_series.len(),
            approx_series.len()
        )));
    }
    let r = |s: &[(f64, f64)]| {
        let (xs, ys): (Vec<f64>, Vec<f64>) = s.iter().copied().unzip();
        pearson(&xs, &ys)
    };
    Ok((r(exact_series)?, r(approx_series)?))
}

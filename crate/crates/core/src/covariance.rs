//! Streaming, mean-centred covariance of token activations.
//!
//! Moments are accumulated as `Σ x` and `Σ x xᵀ` over chunks of rows, so a
//! batch never has to be centred in memory. Finalizing turns them into the
//! unbiased estimate `(Σ x xᵀ − n μ μᵀ) / (n − 1)`, symmetrized.

use std::cell::Cell;
use std::ops::Deref;

use nalgebra::{DMatrix, DVector};

use crate::error::{arg, Error, Result};
use crate::ingest::{ActivationBatch, Tag};

/// Per-thread accounting of live `D×D` covariance buffers.
///
/// Every accumulator and finalized summary owns exactly one such buffer;
/// the gauge counts their `f64` entries so callers can check how much
/// covariance state a pipeline keeps alive at once.
pub mod gauge {
    use super::*;

    thread_local! {
        static LIVE: Cell<usize> = const { Cell::new(0) };
        static PEAK: Cell<usize> = const { Cell::new(0) };
    }

    pub(super) fn add(n: usize) {
        LIVE.with(|l| {
            let v = l.get() + n;
            l.set(v);
            PEAK.with(|p| p.set(p.get().max(v)));
        });
    }

    pub(super) fn sub(n: usize) {
        LIVE.with(|l| l.set(l.get().saturating_sub(n)));
    }

    /// Entries currently held by covariance buffers on this thread.
    pub fn live() -> usize {
        LIVE.with(Cell::get)
    }

    /// High-water mark since the last [`reset_peak`].
    pub fn peak() -> usize {
        PEAK.with(Cell::get)
    }

    pub fn reset_peak() {
        PEAK.with(|p| p.set(live()));
    }
}

/// A square matrix registered with the [`gauge`] for its lifetime.
#[derive(Debug)]
pub struct TrackedMatrix(DMatrix<f64>);

impl TrackedMatrix {
    fn zeros(d: usize) -> Self {
        gauge::add(d * d);
        TrackedMatrix(DMatrix::zeros(d, d))
    }
}

impl Clone for TrackedMatrix {
    fn clone(&self) -> Self {
        gauge::add(self.0.len());
        TrackedMatrix(self.0.clone())
    }
}

impl Drop for TrackedMatrix {
    fn drop(&mut self) {
        gauge::sub(self.0.len());
    }
}

impl Deref for TrackedMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CovarianceMeta {
    pub layer: u32,
    pub step: u64,
    pub tag: Tag,
}

impl CovarianceMeta {
    pub fn of(batch: &ActivationBatch) -> Self {
        let h = batch.header();
        CovarianceMeta {
            layer: h.layer,
            step: h.step,
            tag: h.tag,
        }
    }
}

/// Origin subtracted from every row before accumulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shift {
    /// Raw moments about zero.
    None,
    /// Moments about the first row ever accumulated. Keeps `Σ x xᵀ` small
    /// when activations have a large common offset.
    FirstRow,
}

#[derive(Clone, Debug)]
pub struct MomentAccumulator {
    d: usize,
    n: u64,
    sum: Vec<f64>,
    outer: TrackedMatrix,
    mode: Shift,
    origin: Option<Vec<f64>>,
}

impl MomentAccumulator {
    /// Accumulator shifted by the first row seen.
    pub fn new(d: usize) -> Self {
        Self::with_shift(d, Shift::FirstRow)
    }

    pub fn with_shift(d: usize, mode: Shift) -> Self {
        MomentAccumulator {
            d,
            n: 0,
            sum: vec![0.0; d],
            outer: TrackedMatrix::zeros(d),
            mode,
            origin: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    /// `Σ (x − origin)`.
    pub fn sum(&self) -> &[f64] {
        &self.sum
    }

    /// `Σ (x − origin)(x − origin)ᵀ`.
    pub fn sum_outer(&self) -> &DMatrix<f64> {
        &self.outer
    }

    /// The shift origin, once one has been fixed.
    pub fn origin(&self) -> Option<&[f64]> {
        self.origin.as_deref()
    }

    /// Adds a row-major chunk of `rows.len() / D` samples.
    pub fn accumulate(&mut self, rows: &[f64]) -> Result<()> {
        let d = self.d;
        if d == 0 || !rows.len().is_multiple_of(d) {
            return Err(arg(format!(
                "chunk of {} values is not a whole number of {d}-dimensional rows",
                rows.len()
            )));
        }
        if let Some(i) = rows.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: i / d,
                col: i % d,
            });
        }
        let n_new = rows.len() / d;
        if n_new == 0 {
            return Ok(());
        }
        if self.mode == Shift::FirstRow && self.origin.is_none() {
            self.origin = Some(rows[..d].to_vec());
        }
        let chunk = match &self.origin {
            Some(o) => DMatrix::from_fn(n_new, d, |r, c| rows[r * d + c] - o[c]),
            None => DMatrix::from_row_slice(n_new, d, rows),
        };
        for (s, col) in self.sum.iter_mut().zip(chunk.column_iter()) {
            *s += col.sum();
        }
        let chunk_t = chunk.transpose();
        self.outer.0.gemm(1.0, &chunk_t, &chunk, 1.0);
        self.n += n_new as u64;
        Ok(())
    }

    /// Folds another accumulator over the same origin into this one.
    pub fn merge(&mut self, other: &MomentAccumulator) -> Result<()> {
        if other.d != self.d {
            return Err(arg(format!("cannot merge D={} into D={}", other.d, self.d)));
        }
        if other.n == 0 {
            return Ok(());
        }
        if self.n == 0 {
            self.origin.clone_from(&other.origin);
        } else if self.origin != other.origin {
            return Err(arg(
                "cannot merge accumulators with different shift origins",
            ));
        }
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        self.outer.0 += &other.outer.0;
        self.n += other.n;
        Ok(())
    }

    /// Converts the moments into a covariance summary, reusing the
    /// accumulator's `D×D` buffer.
    pub fn finalize(self, meta: CovarianceMeta) -> Result<CovarianceSummary> {
        if self.n < 2 {
            return Err(Error::InsufficientSamples(self.n));
        }
        let MomentAccumulator {
            d,
            n,
            sum,
            mut outer,
            origin,
            ..
        } = self;
        let nf = n as f64;
        let centred_mean = DVector::from_iterator(d, sum.iter().map(|s| s / nf));
        let m = &mut outer.0;
        for j in 0..d {
            for i in 0..d {
                m[(i, j)] = (m[(i, j)] - nf * centred_mean[i] * centred_mean[j]) / (nf - 1.0);
            }
        }
        for j in 0..d {
            for i in 0..j {
                let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = avg;
                m[(j, i)] = avg;
            }
        }
        let mean = match origin {
            Some(o) => centred_mean + DVector::from_vec(o),
            None => centred_mean,
        };
        Ok(CovarianceSummary {
            mean,
            cov: outer,
            n,
            meta,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CovarianceSummary {
    pub mean: DVector<f64>,
    cov: TrackedMatrix,
    pub n: u64,
    pub meta: CovarianceMeta,
}

impl CovarianceSummary {
    /// Wraps an externally built symmetric matrix, e.g. a test fixture.
    pub fn from_matrix(cov: DMatrix<f64>, n: u64, meta: CovarianceMeta) -> Result<Self> {
        if !cov.is_square() {
            return Err(arg(format!(
                "covariance must be square, got {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if let Some(i) = cov.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: i % cov.nrows(),
                col: i / cov.nrows(),
            });
        }
        let d = cov.nrows();
        gauge::add(d * d);
        Ok(CovarianceSummary {
            mean: DVector::zeros(d),
            cov: TrackedMatrix(cov),
            n,
            meta,
        })
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.cov.trace()
    }
}

/// Covariance of a whole batch, accumulated `chunk_rows` rows at a time.
pub fn covariance_of(batch: &ActivationBatch, chunk_rows: usize) -> Result<CovarianceSummary> {
    let d = batch.dim();
    let mut acc = MomentAccumulator::new(d);
    for chunk in batch.data().chunks(chunk_rows.max(1) * d) {
        acc.accumulate(chunk)?;
    }
    acc.finalize(CovarianceMeta::of(batch))
}

/// Checks that pre- and post-activation batches describe the same token
/// population: same shape and, after sub-sampling, the same source rows.
pub fn paired_population_check(pre: &ActivationBatch, post: &ActivationBatch) -> Result<()> {
    let mismatch = |field: &'static str, a: &dyn ToString, b: &dyn ToString| Error::Pairing {
        field,
        pre: a.to_string(),
        post: b.to_string(),
    };
    let (hp, hq) = (pre.header(), post.header());
    if pre.n_rows() != post.n_rows() {
        return Err(mismatch("N", &pre.n_rows(), &post.n_rows()));
    }
    if hp.batch != hq.batch {
        return Err(mismatch("B", &hp.batch, &hq.batch));
    }
    if hp.seq_len != hq.seq_len {
        return Err(mismatch("S", &hp.seq_len, &hq.seq_len));
    }
    if hp.feature_dim != hq.feature_dim {
        return Err(mismatch("D", &hp.feature_dim, &hq.feature_dim));
    }
    if pre.row_ids() != post.row_ids() {
        let first = pre
            .row_ids()
            .iter()
            .zip(post.row_ids())
            .position(|(a, b)| a != b)
            .unwrap_or(0);
        return Err(mismatch(
            "row indices",
            &format!("row {} at slot {first}", pre.row_ids()[first]),
            &format!("row {}", post.row_ids()[first]),
        ));
    }
    Ok(())
}

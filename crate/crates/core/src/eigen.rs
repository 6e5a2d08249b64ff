//! Descending eigenspectra of covariance matrices.
//!
//! [`eig_full`] returns every eigenvalue. [`eig_randsvd`] and
//! [`eig_lanczos`] estimate only the leading `k` and produce spectra marked
//! as truncated, which the metric functions refuse unless asked explicitly.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::covariance::CovarianceSummary;
use crate::error::{arg, Error, Result};

/// Eigenvalues in `[-NEG_CLAMP_TOL·λ_max, 0)` are round-off and become 0.
pub const NEG_CLAMP_TOL: f64 = 1e-10;

/// Guard against division by a vanishing total variance.
pub const EPS: f64 = 1e-12;

pub const DEFAULT_OVERSAMPLE: usize = 10;
pub const DEFAULT_POWER_ITERS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "solver", rename_all = "lowercase")]
pub enum SpectrumKind {
    Full,
    RandSvd { k: usize },
    Lanczos { k: usize },
}

impl SpectrumKind {
    pub fn is_truncated(self) -> bool {
        !matches!(self, SpectrumKind::Full)
    }
}

impl fmt::Display for SpectrumKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectrumKind::Full => f.write_str("full"),
            SpectrumKind::RandSvd { k } => write!(f, "randsvd({k})"),
            SpectrumKind::Lanczos { k } => write!(f, "lanczos({k})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Eigenspectrum {
    lambdas: Vec<f64>,
    total: f64,
    normalized: Vec<f64>,
    dim: usize,
    kind: SpectrumKind,
    warnings: u32,
}

impl Eigenspectrum {
    /// Validates an already-descending, non-negative spectrum. `dim` is the
    /// ambient dimension; full spectra must have exactly `dim` values.
    pub fn new(lambdas: Vec<f64>, dim: usize, kind: SpectrumKind) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::DegenerateSpectrum("no eigenvalues".into()));
        }
        match kind {
            SpectrumKind::Full if lambdas.len() != dim => {
                return Err(arg(format!(
                    "full spectrum needs {dim} values, got {}",
                    lambdas.len()
                )))
            }
            _ if lambdas.len() > dim => {
                return Err(arg(format!(
                    "{} eigenvalues exceed ambient dimension {dim}",
                    lambdas.len()
                )))
            }
            _ => {}
        }
        if let Some(v) = lambdas.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(arg(format!("eigenvalue {v} is negative or non-finite")));
        }
        if lambdas.windows(2).any(|w| w[0] < w[1]) {
            return Err(arg("eigenvalues must be in non-increasing order"));
        }
        let total: f64 = lambdas.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateSpectrum(format!("total variance {total}")));
        }
        let denom = total.max(EPS);
        let normalized = lambdas.iter().map(|l| l / denom).collect();
        Ok(Eigenspectrum {
            lambdas,
            total,
            normalized,
            dim,
            kind,
            warnings: 0,
        })
    }

    /// Full spectrum from values in any order.
    pub fn from_unsorted(mut values: Vec<f64>) -> Result<Self> {
        values.sort_by(|a, b| b.total_cmp(a));
        let dim = values.len();
        Self::new(values, dim, SpectrumKind::Full)
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Total variance `Σ λᵢ`.
    pub fn total(&self) -> f64 {
        self.total
    }

    /// `λᵢ / Σ λ`; the eigenvalues of the trace-normalized covariance.
    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    /// Ambient dimension `D` (not the number of retained values).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn kind(&self) -> SpectrumKind {
        self.kind
    }

    pub fn is_truncated(&self) -> bool {
        self.kind.is_truncated()
    }

    /// Breakdowns and unconverged Ritz values seen by an iterative solver.
    pub fn warnings(&self) -> u32 {
        self.warnings
    }

    /// Same spectrum with every eigenvalue multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(arg(format!("scale must be positive, got {c}")));
        }
        let mut out = Self::new(
            self.lambdas.iter().map(|l| l * c).collect(),
            self.dim,
            self.kind,
        )?;
        out.warnings = self.warnings;
        Ok(out)
    }
}

/// Sorts descending, clamps round-off negatives and rejects real ones.
fn finish(
    mut values: Vec<f64>,
    dim: usize,
    kind: SpectrumKind,
    warnings: u32,
) -> Result<Eigenspectrum> {
    values.sort_by(|a, b| b.total_cmp(a));
    let lambda_max = values.first().copied().unwrap_or(0.0);
    if !(lambda_max > 0.0) {
        return Err(Error::DegenerateSpectrum(format!(
            "largest eigenvalue is {lambda_max}"
        )));
    }
    for v in values.iter_mut() {
        if *v < 0.0 {
            if *v < -NEG_CLAMP_TOL * lambda_max {
                return Err(Error::NonPsd {
                    value: *v,
                    tol: NEG_CLAMP_TOL,
                });
            }
            *v = 0.0;
        }
    }
    let mut spec = Eigenspectrum::new(values, dim, kind)?;
    spec.warnings = warnings;
    Ok(spec)
}

fn check_trace(cov: &CovarianceSummary) -> Result<()> {
    let tr = cov.trace();
    if !(tr > 0.0) {
        return Err(Error::DegenerateSpectrum(format!("trace is {tr}")));
    }
    Ok(())
}

/// All eigenvalues of the covariance, descending.
pub fn eig_full(cov: &CovarianceSummary) -> Result<Eigenspectrum> {
    check_trace(cov)?;
    let values = cov.cov().symmetric_eigenvalues();
    finish(values.as_slice().to_vec(), cov.dim(), SpectrumKind::Full, 0)
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn orthonormal_basis(y: DMatrix<f64>) -> DMatrix<f64> {
    y.qr().q()
}

/// Leading-`k` eigenvalues by a randomized range finder.
///
/// Samples `k + oversample` Gaussian directions (capped at `D`), sharpens
/// the range with `power_iters` rounds of re-orthonormalized multiplication
/// by `Σ Σᵀ`, and returns the Rayleigh–Ritz values of the projected matrix.
pub fn eig_randsvd(
    cov: &CovarianceSummary,
    k: usize,
    oversample: usize,
    power_iters: usize,
    seed: u64,
) -> Result<Eigenspectrum> {
    let d = cov.dim();
    if k == 0 || k > d {
        return Err(arg(format!("rank k must be in 1..={d}, got {k}")));
    }
    check_trace(cov)?;
    let a = cov.cov();
    let width = (k + oversample).min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = gaussian_matrix(d, width, &mut rng);
    let mut q = orthonormal_basis(a * omega);
    for _ in 0..power_iters {
        q = orthonormal_basis(a.tr_mul(&q));
        q = orthonormal_basis(a * &q);
    }
    let b = q.tr_mul(&(a * &q));
    let b = (&b + b.transpose()) * 0.5;
    let mut ritz = b.symmetric_eigenvalues().as_slice().to_vec();
    ritz.sort_by(|x, y| y.total_cmp(x));
    ritz.truncate(k);
    finish(ritz, d, SpectrumKind::RandSvd { k }, 0)
}

/// Leading-`k` Ritz values from a Lanczos tridiagonalization with full
/// reorthogonalization.
///
/// Runs `min(max_iters, D)` steps. When the Krylov space becomes invariant
/// before that, the iteration restarts from a fresh random vector orthogonal
/// to the basis so far; each such breakdown, and each returned Ritz value
/// whose residual bound exceeds `1e-8·|θ_max|`, adds one to the spectrum's
/// warning count.
pub fn eig_lanczos(
    cov: &CovarianceSummary,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Eigenspectrum> {
    let d = cov.dim();
    if k == 0 || k > d {
        return Err(arg(format!("rank k must be in 1..={d}, got {k}")));
    }
    if max_iters < k {
        return Err(arg(format!(
            "max_iters ({max_iters}) must be at least k ({k})"
        )));
    }
    check_trace(cov)?;
    let a = cov.cov();
    let steps = max_iters.min(d);
    let scale = a.norm();
    let breakdown_tol = 1e-12 * scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = 0u32;

    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(steps);
    let mut alpha = Vec::with_capacity(steps);
    let mut beta: Vec<f64> = Vec::with_capacity(steps);

    let start = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
    basis.push(start.normalize());
    let mut residual_norm = 0.0;

    loop {
        let j = basis.len() - 1;
        let v = &basis[j];
        let mut w = a * v;
        let aj = v.dot(&w);
        alpha.push(aj);
        w.axpy(-aj, v, 1.0);
        if j > 0 {
            w.axpy(-beta[j - 1], &basis[j - 1], 1.0);
        }
        reorthogonalize(&mut w, &basis);
        let b = w.norm();
        if basis.len() == steps {
            residual_norm = b;
            break;
        }
        if b > breakdown_tol {
            beta.push(b);
            basis.push(w / b);
            continue;
        }
        // Invariant subspace found: continue the basis from a fresh direction.
        warnings += 1;
        let mut fresh = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        reorthogonalize(&mut fresh, &basis);
        let fresh_norm = fresh.norm();
        if fresh_norm <= 1e-8 {
            break;
        }
        beta.push(0.0);
        basis.push(fresh / fresh_norm);
    }

    let m = alpha.len();
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    order.truncate(k);
    let theta_max = order
        .first()
        .map(|&i| eig.eigenvalues[i].abs())
        .unwrap_or(0.0);
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    warnings += order
        .iter()
        .filter(|&&i| (residual_norm * eig.eigenvectors[(m - 1, i)]).abs() > 1e-8 * theta_max)
        .count() as u32;
    finish(values, d, SpectrumKind::Lanczos { k }, warnings)
}

/// Two passes of classical Gram–Schmidt against `basis`.
fn reorthogonalize(w: &mut DVector<f64>, basis: &[DVector<f64>]) {
    for _ in 0..2 {
        for q in basis {
            let c = q.dot(w);
            w.axpy(-c, q, 1.0);
        }
    }
}

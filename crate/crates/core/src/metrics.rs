//! Scalar summaries of eigenspectra.
//!
//! * spectral entropy (SE): Shannon entropy of the normalized spectrum, in nats;
//! * participation ratio (PR): `(Σλ)² / Σλ²`, the effective number of directions;
//! * eigenvalue early enrichment (EEE): mean excess of the cumulative
//!   variance curve over the uniform diagonal, scaled to `[0, 1)`;
//! * Jensen–Shannon divergence (JS) between a pre/post pair, in nats.
//!
//! All of them are invariant to a uniform rescaling of the eigenvalues.
//! Zero eigenvalues contribute nothing to the entropies (`0·ln 0 = 0`).

use std::f64::consts::LN_2;

use serde::Serialize;

use crate::eigen::Eigenspectrum;
use crate::error::{arg, Error, Result};

/// Whether a metric may be computed on a top-`k` spectrum. Allowed metrics
/// treat the `k` retained values as if they were the whole spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Truncation {
    #[default]
    Reject,
    Allow,
}

fn check(spec: &Eigenspectrum, policy: Truncation) -> Result<()> {
    if spec.is_truncated() && policy == Truncation::Reject {
        return Err(Error::TruncatedSpectrum {
            kind: spec.kind().to_string(),
        });
    }
    Ok(())
}

/// Neumaier-compensated sum.
pub(crate) fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn xlogy_ratio(p: f64, q: f64) -> f64 {
    if p > 0.0 {
        p * (2.0 * p / (p + q)).ln()
    } else {
        0.0
    }
}

pub fn spectral_entropy(spec: &Eigenspectrum, policy: Truncation) -> Result<f64> {
    check(spec, policy)?;
    let h = -stable_sum(
        spec.normalized()
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln()),
    );
    // rounding can push a flat spectrum a hair past its maximum
    Ok(h.clamp(0.0, (spec.len() as f64).ln()))
}

pub fn participation_ratio(spec: &Eigenspectrum, policy: Truncation) -> Result<f64> {
    check(spec, policy)?;
    // Scaling by λ₁ keeps the squares in range and is exact for flat spectra.
    let top = spec.lambdas()[0];
    let s1 = stable_sum(spec.lambdas().iter().map(|l| l / top));
    let s2 = stable_sum(spec.lambdas().iter().map(|l| (l / top) * (l / top)));
    Ok((s1 * s1 / s2).clamp(1.0, spec.len() as f64))
}

/// Eigenvalue early enrichment.
///
/// The cumulative curve `S̃ₖ = Σ_{i≤k} λᵢ / Λ` is never materialized:
/// `Σₖ S̃ₖ = Σᵢ λᵢ (D − i + 1) / Λ` (1-based `i`), and `Σₖ k/D = (D + 1)/2`.
pub fn eee(spec: &Eigenspectrum, policy: Truncation) -> Result<f64> {
    check(spec, policy)?;
    let lambdas = spec.lambdas();
    let d = lambdas.len();
    let weighted = stable_sum(lambdas.iter().enumerate().map(|(i, l)| l * (d - i) as f64));
    let area = weighted / spec.total() - (d as f64 + 1.0) / 2.0;
    Ok((2.0 * area / d as f64).max(0.0))
}

/// Symmetric, bounded by `ln 2`; evaluated in the midpoint form
/// `½ Σ p ln(2p/(p+q)) + ½ Σ q ln(2q/(p+q))`.
pub fn js_divergence(pre: &Eigenspectrum, post: &Eigenspectrum, policy: Truncation) -> Result<f64> {
    check(pre, policy)?;
    check(post, policy)?;
    if pre.len() != post.len() || pre.dim() != post.dim() {
        return Err(arg(format!(
            "spectra differ in dimension: {} vs {}",
            pre.len(),
            post.len()
        )));
    }
    js_distributions(pre.normalized(), post.normalized())
}

/// JS divergence between two probability vectors of equal length.
///
/// Unlike spectra, these need not be sorted, so disjoint supports are
/// possible (giving `ln 2`).
pub fn js_distributions(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(arg(format!(
            "distributions differ in length: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if let Some(v) = p.iter().chain(q).find(|v| !v.is_finite() || **v < 0.0) {
        return Err(arg(format!("probability {v} is negative or non-finite")));
    }
    let left = stable_sum(p.iter().zip(q).map(|(&a, &b)| xlogy_ratio(a, b)));
    let right = stable_sum(q.iter().zip(p).map(|(&a, &b)| xlogy_ratio(a, b)));
    Ok((0.5 * left + 0.5 * right).clamp(0.0, LN_2))
}

/// `PR_post / PR_pre`: how much the nonlinearity expanded the effective dimension.
pub fn pr_gain(pre: &Eigenspectrum, post: &Eigenspectrum, policy: Truncation) -> Result<f64> {
    Ok(participation_ratio(post, policy)? / participation_ratio(pre, policy)?)
}

/// `EEE_post − EEE_pre`; more negative means stronger flattening.
pub fn delta_eee(pre: &Eigenspectrum, post: &Eigenspectrum, policy: Truncation) -> Result<f64> {
    Ok(eee(post, policy)? - eee(pre, policy)?)
}

/// Every metric for one `(layer, step)` pre/post pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub layer: u32,
    pub step: u64,
    pub se_pre: f64,
    pub se_post: f64,
    pub pr_pre: f64,
    pub pr_post: f64,
    pub eee_pre: f64,
    pub eee_post: f64,
    pub js: f64,
    pub pr_gain: f64,
    pub delta_eee: f64,
    /// Computed from top-`k` spectra.
    pub truncated: bool,
}

/// Names of the per-spectrum and paired metrics, in output order.
pub const METRIC_NAMES: [&str; 9] = [
    "se_pre",
    "se_post",
    "pr_pre",
    "pr_post",
    "eee_pre",
    "eee_post",
    "js",
    "pr_gain",
    "delta_eee",
];

impl MetricRecord {
    pub fn from_spectra(
        layer: u32,
        step: u64,
        pre: &Eigenspectrum,
        post: &Eigenspectrum,
        policy: Truncation,
    ) -> Result<Self> {
        let pr_pre = participation_ratio(pre, policy)?;
        let pr_post = participation_ratio(post, policy)?;
        let eee_pre = eee(pre, policy)?;
        let eee_post = eee(post, policy)?;
        Ok(MetricRecord {
            layer,
            step,
            se_pre: spectral_entropy(pre, policy)?,
            se_post: spectral_entropy(post, policy)?,
            pr_pre,
            pr_post,
            eee_pre,
            eee_post,
            js: js_divergence(pre, post, policy)?,
            pr_gain: pr_post / pr_pre,
            delta_eee: eee_post - eee_pre,
            truncated: pre.is_truncated() || post.is_truncated(),
        })
    }

    /// Value of a metric by its name in [`METRIC_NAMES`].
    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "se_pre" => self.se_pre,
            "se_post" => self.se_post,
            "pr_pre" => self.pr_pre,
            "pr_post" => self.pr_post,
            "eee_pre" => self.eee_pre,
            "eee_post" => self.eee_post,
            "js" => self.js,
            "pr_gain" => self.pr_gain,
            "delta_eee" => self.delta_eee,
            _ => return None,
        })
    }

    pub fn values(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        METRIC_NAMES.iter().map(move |&n| (n, self.get(n).unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigen::SpectrumKind;

    fn spec(v: &[f64]) -> Eigenspectrum {
        Eigenspectrum::new(v.to_vec(), v.len(), SpectrumKind::Full).unwrap()
    }

    fn uniform(m: usize, d: usize) -> Eigenspectrum {
        let mut v = vec![0.0; d];
        v[..m].fill(1.0);
        spec(&v)
    }

    const R: Truncation = Truncation::Reject;

    #[test]
    fn entropy_examples() {
        let se = spectral_entropy(&uniform(768, 768), R).unwrap();
        assert!((se - 768f64.ln()).abs() < 1e-12);
        assert!((se - 6.6438).abs() < 1e-4);
        assert_eq!(spectral_entropy(&uniform(1, 8), R).unwrap(), 0.0);
        let se = spectral_entropy(&spec(&[0.5, 0.25, 0.25]), R).unwrap();
        assert!((se - 1.5 * LN_2).abs() < 1e-15);
        assert!((se - 1.03972).abs() < 1e-5);
    }

    #[test]
    fn participation_examples() {
        assert_eq!(participation_ratio(&uniform(17, 17), R).unwrap(), 17.0);
        assert_eq!(participation_ratio(&uniform(1, 9), R).unwrap(), 1.0);
        assert!((participation_ratio(&spec(&[3.0, 1.0]), R).unwrap() - 1.6).abs() < 1e-15);
    }

    #[test]
    fn eee_examples() {
        assert_eq!(eee(&uniform(10, 10), R).unwrap(), 0.0);
        let one_hot = eee(&uniform(1, 768), R).unwrap();
        assert!((one_hot - 767.0 / 768.0).abs() < 1e-12);
        assert!((one_hot - 0.99870).abs() < 1e-5);
        assert!((eee(&uniform(1, 2), R).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn js_examples() {
        let a = spec(&[0.7, 0.2, 0.1]);
        assert_eq!(js_divergence(&a, &a, R).unwrap(), 0.0);
        let js = js_divergence(&spec(&[1.0, 0.0]), &spec(&[0.5, 0.5]), R).unwrap();
        let hand = 0.5 * (4.0f64 / 3.0).ln() + 0.5 * (0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2f64.ln());
        assert!((js - hand).abs() < 1e-15);
        assert!((js - 0.21576).abs() < 1e-5);
        let disjoint = js_distributions(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((disjoint - LN_2).abs() < 1e-6);
        assert!(js_divergence(&spec(&[1.0, 0.0]), &spec(&[1.0, 1.0, 1.0]), R).is_err());
        assert!(js_distributions(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn gain_and_delta() {
        let (one, flat) = (uniform(1, 4), uniform(4, 4));
        assert_eq!(pr_gain(&flat, &flat, R).unwrap(), 1.0);
        assert_eq!(pr_gain(&one, &flat, R).unwrap(), 4.0);
        assert_eq!(pr_gain(&flat, &one, R).unwrap(), 0.25);
        assert_eq!(delta_eee(&flat, &flat, R).unwrap(), 0.0);
        let d = delta_eee(&uniform(1, 768), &uniform(768, 768), R).unwrap();
        assert!((d + 767.0 / 768.0).abs() < 1e-12);
        let d = delta_eee(&uniform(2, 4), &flat, R).unwrap();
        assert!((d + 0.5).abs() < 1e-15);
    }

    #[test]
    fn truncated_spectra_need_opt_in() {
        let t = Eigenspectrum::new(vec![3.0, 1.0], 10, SpectrumKind::RandSvd { k: 2 }).unwrap();
        assert!(matches!(
            spectral_entropy(&t, R),
            Err(Error::TruncatedSpectrum { .. })
        ));
        assert!(participation_ratio(&t, R).is_err());
        assert!(eee(&t, R).is_err());
        assert!((participation_ratio(&t, Truncation::Allow).unwrap() - 1.6).abs() < 1e-15);
        let rec = MetricRecord::from_spectra(0, 0, &t, &t, Truncation::Allow).unwrap();
        assert!(rec.truncated);
    }

    #[test]
    fn record_names_round_trip() {
        let rec = MetricRecord::from_spectra(1, 2, &uniform(1, 4), &uniform(4, 4), R).unwrap();
        assert_eq!(rec.values().count(), METRIC_NAMES.len());
        assert_eq!(rec.get("pr_gain"), Some(4.0));
        assert_eq!(rec.get("nope"), None);
    }
}

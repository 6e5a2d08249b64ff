//! Independent reference implementations checked against the library.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ffnspec::covariance::{covariance_of, CovarianceMeta, CovarianceSummary};
use ffnspec::eigen::{eig_full, eig_lanczos, eig_randsvd, Eigenspectrum, SpectrumKind};
use ffnspec::ingest::Tag;
use ffnspec::metrics::{eee, js_divergence, participation_ratio, spectral_entropy, Truncation};
use ffnspec::synth::{random_orthogonal, sample_gaussian_batch, SpectrumFamily, SpectrumSpec};

const R: Truncation = Truncation::Reject;

/// Cyclic Jacobi rotations until the off-diagonal mass vanishes.
fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off < 1e-30 * a.norm_squared().max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut v: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    v.sort_by(|x, y| y.total_cmp(x));
    v
}

fn summary(m: DMatrix<f64>) -> CovarianceSummary {
    let meta = CovarianceMeta {
        layer: 0,
        step: 0,
        tag: Tag::Pre,
    };
    CovarianceSummary::from_matrix(m, 10, meta).unwrap()
}

fn random_psd(rng: &mut ChaCha8Rng, d: usize, lambdas: &[f64]) -> DMatrix<f64> {
    let q = random_orthogonal(d, rng);
    let m = &q * DMatrix::from_diagonal(&DVector::from_column_slice(lambdas)) * q.transpose();
    (&m + m.transpose()) * 0.5
}

#[test]
fn full_solver_matches_jacobi() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..40 {
        let d = rng.random_range(1..=20);
        let mut lambdas: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..5.0)).collect();
        if trial % 4 == 0 {
            // repeated and zero eigenvalues
            for l in lambdas.iter_mut().skip(d / 2) {
                *l = if trial % 8 == 0 { 0.0 } else { 1.0 };
            }
            lambdas[0] = 2.0;
        }
        let m = random_psd(&mut rng, d, &lambdas);
        let oracle = jacobi_eigenvalues(&m);
        let got = eig_full(&summary(m)).unwrap();
        let scale = oracle[0].abs().max(1e-300);
        for (a, b) in got.lambdas().iter().zip(&oracle) {
            assert!(
                (a - b.max(0.0)).abs() <= 1e-10 * scale,
                "trial {trial}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn truncated_solvers_match_jacobi_on_leading_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for trial in 0..20 {
        let d = rng.random_range(8..=24);
        // clear gap after the top k
        let k = rng.random_range(1..=4);
        let lambdas: Vec<f64> = (0..d)
            .map(|i| {
                if i < k {
                    10.0 + (k - i) as f64
                } else {
                    rng.random_range(0.0..0.5)
                }
            })
            .collect();
        let m = random_psd(&mut rng, d, &lambdas);
        let oracle = jacobi_eigenvalues(&m);
        let cov = summary(m);
        let rs = eig_randsvd(&cov, k, 10, 3, trial).unwrap();
        let lz = eig_lanczos(&cov, k, d, trial).unwrap();
        for s in [&rs, &lz] {
            assert_eq!(s.len(), k);
            for (a, b) in s.lambdas().iter().zip(&oracle) {
                assert!(
                    (a - b).abs() <= 1e-6 * b,
                    "trial {trial} {}: {a} vs {b}",
                    s.kind()
                );
            }
        }
    }
}

fn direct_eee(lambdas: &[f64]) -> f64 {
    let d = lambdas.len();
    let total: f64 = lambdas.iter().sum();
    let mut cum = 0.0;
    let mut area = 0.0;
    for (i, l) in lambdas.iter().enumerate() {
        cum += l / total;
        area += cum - (i + 1) as f64 / d as f64;
    }
    2.0 * area / d as f64
}

fn direct_se(lambdas: &[f64]) -> f64 {
    let total: f64 = lambdas.iter().sum();
    lambdas
        .iter()
        .map(|l| l / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

fn direct_pr(lambdas: &[f64]) -> f64 {
    let s: f64 = lambdas.iter().sum();
    let s2: f64 = lambdas.iter().map(|l| l * l).sum();
    s * s / s2
}

/// Entropy form: `H((p + q) / 2) − (H(p) + H(q)) / 2`.
fn direct_js(p: &[f64], q: &[f64]) -> f64 {
    let (tp, tq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    let h = |v: &mut dyn Iterator<Item = f64>| -> f64 {
        v.filter(|&x| x > 0.0).map(|x| -x * x.ln()).sum()
    };
    let hm = h(&mut p.iter().zip(q).map(|(a, b)| 0.5 * (a / tp + b / tq)));
    let hp = h(&mut p.iter().map(|a| a / tp));
    let hq = h(&mut q.iter().map(|b| b / tq));
    hm - 0.5 * (hp + hq)
}

fn sorted_random(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d)
        .map(|_| {
            if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(0.0..3.0)
            }
        })
        .collect();
    v[0] = v[0].max(0.1);
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

#[test]
fn metrics_match_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..500 {
        let d = rng.random_range(1..=300);
        let p = sorted_random(&mut rng, d);
        let q = sorted_random(&mut rng, d);
        let sp = Eigenspectrum::new(p.clone(), d, SpectrumKind::Full).unwrap();
        let sq = Eigenspectrum::new(q.clone(), d, SpectrumKind::Full).unwrap();
        assert!((eee(&sp, R).unwrap() - direct_eee(&p).max(0.0)).abs() < 1e-12);
        assert!((spectral_entropy(&sp, R).unwrap() - direct_se(&p)).abs() < 1e-11);
        assert!(
            (participation_ratio(&sp, R).unwrap() - direct_pr(&p)).abs() < 1e-10 * direct_pr(&p)
        );
        assert!((js_divergence(&sp, &sq, R).unwrap() - direct_js(&p, &q).max(0.0)).abs() < 1e-11);
    }
}

#[test]
fn sample_covariance_tracks_population_spectrum() {
    let d = 12;
    let spec = SpectrumSpec::new(SpectrumFamily::Geometric(0.7), d);
    let batch = sample_gaussian_batch(&spec, 400 * d, 9).unwrap();
    let got = eig_full(&covariance_of(&batch, 257).unwrap()).unwrap();
    let want = spec.values().unwrap();
    for (a, b) in got.lambdas().iter().zip(&want) {
        // sampling error of an eigenvalue is about b·sqrt(2/n)
        assert!((a - b).abs() < 0.1 * b + 0.01, "{a} vs {b}");
    }
}

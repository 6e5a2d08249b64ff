use std::f64::consts::LN_2;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ffnspec::approx::{apply_plan, make_plan};
use ffnspec::covariance::{
    covariance_of, paired_population_check, CovarianceMeta, MomentAccumulator,
};
use ffnspec::diagnostics::{
    classify_regime, match_signature, pearson, RegimeThresholds, Signature, Trend,
};
use ffnspec::eigen::{eig_full, Eigenspectrum, SpectrumKind};
use ffnspec::ingest::{
    decode_dump, encode_dump, parse_csv_dump, stratify_by_position, ActivationBatch, Dtype,
    DumpHeader, Tag,
};
use ffnspec::metrics::{
    eee, js_divergence, participation_ratio, spectral_entropy, MetricRecord, Truncation,
};
use ffnspec::report::HeatmapGrid;
use ffnspec::synth::random_orthogonal;

const R: Truncation = Truncation::Reject;

fn meta() -> CovarianceMeta {
    CovarianceMeta {
        layer: 0,
        step: 0,
        tag: Tag::Pre,
    }
}

/// Rows × D matrix of moderate values, N ≥ 2.
fn rows() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (2usize..40, 1usize..7).prop_flat_map(|(n, d)| {
        (
            Just(n),
            Just(d),
            prop::collection::vec(-10.0f64..10.0, n * d),
        )
    })
}

fn spectrum_values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 1e-6f64..1e3], 1..60).prop_map(|mut v| {
        if v.iter().all(|&x| x == 0.0) {
            v[0] = 1.0;
        }
        v.sort_by(|a, b| b.total_cmp(a));
        v
    })
}

fn spectrum(v: Vec<f64>) -> Eigenspectrum {
    let d = v.len();
    Eigenspectrum::new(v, d, SpectrumKind::Full).unwrap()
}

fn cov(d: usize, data: &[f64], chunk: usize) -> DMatrix<f64> {
    let mut acc = MomentAccumulator::new(d);
    for part in data.chunks(chunk * d) {
        acc.accumulate(part).unwrap();
    }
    acc.finalize(meta()).unwrap().cov().clone()
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    (a - b).norm() <= tol * a.norm().max(b.norm()).max(1e-12)
}

fn batch_of(n: usize, d: usize, data: Vec<f64>) -> ActivationBatch {
    ActivationBatch::new(
        DumpHeader::new(Dtype::F64, 1, n as u32, d as u32, 0, 0, Tag::Pre),
        data,
    )
    .unwrap()
}

fn trend() -> impl Strategy<Value = Trend> {
    prop_oneof![Just(Trend::Up), Just(Trend::Down), Just(Trend::Flat)]
}

proptest! {
    #[test]
    fn chunk_order_does_not_matter((n, d, data) in rows(), chunk in 1usize..10, seed: u64) {
        let whole = cov(d, &data, n);
        prop_assert!(close(&whole, &cov(d, &data, chunk), 1e-10));
        // feed the chunks in shuffled order
        let mut parts: Vec<&[f64]> = data.chunks(chunk * d).collect();
        use rand::seq::SliceRandom;
        parts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut acc = MomentAccumulator::new(d);
        for p in parts {
            acc.accumulate(p).unwrap();
        }
        prop_assert!(close(&whole, acc.finalize(meta()).unwrap().cov(), 1e-10));
    }

    #[test]
    fn merge_equals_single_pass((n, d, data) in rows(), split in 0usize..40) {
        let split = split.min(n) * d;
        let mut a = MomentAccumulator::new(d);
        a.accumulate(&data).unwrap();
        let mut left = MomentAccumulator::new(d);
        left.accumulate(&data[..split]).unwrap();
        let mut right = MomentAccumulator::new(d);
        right.accumulate(&data[split..]).unwrap();
        if left.merge(&right).is_ok() {
            prop_assert!(close(a.finalize(meta()).unwrap().cov(), left.finalize(meta()).unwrap().cov(), 1e-10));
        }
    }

    #[test]
    fn covariance_scales_quadratically((n, d, data) in rows(), c in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0]) {
        let scaled: Vec<f64> = data.iter().map(|x| c * x).collect();
        prop_assert!(close(&(cov(d, &data, n) * (c * c)), &cov(d, &scaled, n), 1e-10));
    }

    #[test]
    fn covariance_ignores_translation((_n, d, data) in rows(), shift in prop::collection::vec(-1e3f64..1e3, 6)) {
        let moved: Vec<f64> = data.iter().enumerate().map(|(i, x)| x + shift[i % d]).collect();
        prop_assert!(close(&cov(d, &data, 3), &cov(d, &moved, 3), 1e-9));
    }

    #[test]
    fn spectrum_is_rotation_invariant((n, d, data) in rows(), seed: u64) {
        let x = DMatrix::from_row_slice(n, d, &data);
        let q = random_orthogonal(d, &mut ChaCha8Rng::seed_from_u64(seed));
        let rotated = &x * q;
        let rot: Vec<f64> = (0..n).flat_map(|i| rotated.row(i).iter().copied().collect::<Vec<_>>()).collect();
        let a = covariance_of(&batch_of(n, d, data), 5).unwrap();
        let b = covariance_of(&batch_of(n, d, rot), 5).unwrap();
        if a.trace() > 1e-9 {
            let (sa, sb) = (eig_full(&a).unwrap(), eig_full(&b).unwrap());
            let top = sa.lambdas()[0];
            for (u, v) in sa.lambdas().iter().zip(sb.lambdas()) {
                prop_assert!((u - v).abs() <= 1e-9 * top);
            }
        }
    }

    #[test]
    fn metric_bounds(p in spectrum_values(), seed: u64) {
        let d = p.len();
        let mut q = p.clone();
        use rand::seq::SliceRandom;
        q.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        q.sort_by(|a, b| b.total_cmp(a));
        q.reverse();
        q[0] += 1.0;
        q.sort_by(|a, b| b.total_cmp(a));
        let (sp, sq) = (spectrum(p), spectrum(q));
        let se = spectral_entropy(&sp, R).unwrap();
        let pr = participation_ratio(&sp, R).unwrap();
        let e = eee(&sp, R).unwrap();
        let js = js_divergence(&sp, &sq, R).unwrap();
        prop_assert!((0.0..=(d as f64).ln()).contains(&se));
        prop_assert!((1.0..=d as f64).contains(&pr));
        prop_assert!((0.0..1.0).contains(&e));
        prop_assert!((0.0..=LN_2).contains(&js));
        prop_assert_eq!(js, js_divergence(&sq, &sp, R).unwrap());
        prop_assert_eq!(js_divergence(&sp, &sp, R).unwrap(), 0.0);
    }

    #[test]
    fn metrics_are_scale_invariant(p in spectrum_values(), c in 1e-3f64..1e3) {
        let s = spectrum(p);
        let t = s.scaled(c).unwrap();
        prop_assert!((spectral_entropy(&s, R).unwrap() - spectral_entropy(&t, R).unwrap()).abs() < 1e-10);
        prop_assert!((participation_ratio(&s, R).unwrap() - participation_ratio(&t, R).unwrap()).abs() < 1e-10 * s.len() as f64);
        prop_assert!((eee(&s, R).unwrap() - eee(&t, R).unwrap()).abs() < 1e-10);
        prop_assert!(js_divergence(&s, &t, R).unwrap() < 1e-10);
    }

    /// Mixing toward the uniform spectrum is majorized by the original:
    /// entropy and PR cannot fall, EEE cannot rise.
    #[test]
    fn flattening_is_monotone(p in spectrum_values(), t in 0.0f64..1.0) {
        let total: f64 = p.iter().sum();
        let d = p.len() as f64;
        let mixed: Vec<f64> = p.iter().map(|x| (1.0 - t) * x / total + t / d).collect();
        let (a, b) = (spectrum(p), spectrum(mixed));
        prop_assert!(spectral_entropy(&b, R).unwrap() >= spectral_entropy(&a, R).unwrap() - 1e-12);
        prop_assert!(participation_ratio(&b, R).unwrap() >= participation_ratio(&a, R).unwrap() * (1.0 - 1e-12));
        prop_assert!(eee(&b, R).unwrap() <= eee(&a, R).unwrap() + 1e-12);
    }

    #[test]
    fn classifier_is_total(
        js in prop_oneof![Just(0.1), Just(0.01), 0.0f64..0.7],
        gain in prop_oneof![Just(5.0), 0.0f64..1e4],
        de in prop_oneof![Just(-0.1), Just(0.02), Just(-0.02), -1.0f64..1.0],
    ) {
        let rec = MetricRecord {
            layer: 0, step: 0, se_pre: 1.0, se_post: 1.0, pr_pre: 1.0, pr_post: gain,
            eee_pre: 0.5, eee_post: 0.5 + de, js, pr_gain: gain, delta_eee: de, truncated: false,
        };
        prop_assert!(classify_regime(&rec, &RegimeThresholds::default()).is_ok());
    }

    #[test]
    fn labels_survive_rescaling(p in spectrum_values(), seed: u64, a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let mut q = p.clone();
        use rand::seq::SliceRandom;
        q.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        q.sort_by(|x, y| y.total_cmp(x));
        let q: Vec<f64> = q.iter().enumerate().map(|(i, x)| x + 1.0 / (i + 1) as f64).collect();
        let (sp, sq) = (spectrum(p), spectrum(q));
        let th = RegimeThresholds::default();
        let base = classify_regime(&MetricRecord::from_spectra(0, 0, &sp, &sq, R).unwrap(), &th).unwrap();
        let rec = MetricRecord::from_spectra(0, 0, &sp.scaled(a).unwrap(), &sq.scaled(b).unwrap(), R).unwrap();
        prop_assert_eq!(classify_regime(&rec, &th).unwrap(), base);
    }

    #[test]
    fn signature_table(se in trend(), pr in trend(), e in trend(), js in trend()) {
        let want = match (se, pr, e) {
            (Trend::Up, Trend::Up, Trend::Down) => Signature::HealthySpectralFlattening,
            (Trend::Down, Trend::Down, Trend::Up) => Signature::SpectralCollapse,
            _ => Signature::NoMatch,
        };
        prop_assert_eq!(match_signature(se, pr, e, js), want);
    }

    #[test]
    fn pearson_is_affine_invariant(
        xs in prop::collection::vec(-100.0f64..100.0, 3..30),
        noise in prop::collection::vec(-1.0f64..1.0, 30),
        a in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
        b in -50.0f64..50.0,
    ) {
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, n)| x * 0.3 + n * 10.0).collect();
        if let Ok(base) = pearson(&xs, &ys) {
            prop_assert!(base.r.abs() <= 1.0);
            let moved: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let r = pearson(&moved, &ys).unwrap().r;
            prop_assert!((r - base.r.signum() * a.signum() * base.r.abs()).abs() < 1e-9);
        }
    }

    #[test]
    fn binary_round_trip(
        b in 1u32..4, s in 1u32..6, d in 1u32..5, layer: u32, step: u64, post: bool, f32_payload: bool,
        seed: u64,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (b * s * d) as usize;
        let dtype = if f32_payload { Dtype::F32 } else { Dtype::F64 };
        let tag = if post { Tag::Post } else { Tag::Pre };
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1e6..1e6)).collect();
        let batch = ActivationBatch::new(DumpHeader::new(Dtype::F64, b, s, d, layer, step, tag), data)
            .unwrap()
            .to_dtype(dtype);
        let bytes = encode_dump(&batch).unwrap();
        let back = decode_dump(&bytes).unwrap();
        prop_assert_eq!(&back, &batch);
        prop_assert!(decode_dump(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn csv_dump_round_trip(b in 1u32..3, s in 1u32..5, d in 1u32..4, vals in prop::collection::vec(-1e3f64..1e3, 24)) {
        let n = (b * s) as usize;
        let data = vals[..n * d as usize].to_vec();
        let mut text = format!("B,S,D,layer,step,tag\n{b},{s},{d},3,7,post\n");
        for row in data.chunks(d as usize) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        let batch = parse_csv_dump(&text).unwrap();
        prop_assert_eq!(batch.data(), &data[..]);
        prop_assert_eq!(batch.header().tag, Tag::Post);
    }

    #[test]
    fn stratification_partitions_rows(b in 1u32..4, s in 1u32..20, g in 1usize..20) {
        let n = (b * s) as usize;
        let batch = ActivationBatch::new(DumpHeader::new(Dtype::F64, b, s, 1, 0, 0, Tag::Pre), vec![0.0; n]).unwrap();
        match stratify_by_position(&batch, g) {
            Ok(groups) => {
                prop_assert_eq!(groups.len(), g);
                let mut all: Vec<usize> = groups.iter().flat_map(|gr| gr.row_indices.clone()).collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                for gr in &groups {
                    prop_assert!(!gr.positions.is_empty());
                }
            }
            Err(_) => prop_assert!(g > s as usize),
        }
    }

    #[test]
    fn plans_pair_pre_and_post(n in 2usize..200, f in 0.001f64..=1.0, seed: u64) {
        let plan = make_plan(n, f, seed).unwrap();
        let pre = batch_of(n, 1, vec![1.0; n]);
        let post = batch_of(n, 1, vec![2.0; n]).with_meta(0, 0, Tag::Post);
        let (a, b) = (apply_plan(&pre, &plan).unwrap(), apply_plan(&post, &plan).unwrap());
        prop_assert!(paired_population_check(&a, &b).is_ok());
        prop_assert_eq!(a.row_ids(), plan.row_indices());
        prop_assert!(plan.row_indices().windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(plan, make_plan(n, f, seed).unwrap());
    }

    #[test]
    fn grid_csv_round_trip(
        layers in prop::collection::btree_set(0u32..100, 1..5),
        steps in prop::collection::btree_set(0u64..10_000, 1..5),
        seed: u64,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<u32> = layers.into_iter().collect();
        let steps: Vec<u64> = steps.into_iter().collect();
        let values = layers
            .iter()
            .map(|_| steps.iter().map(|_| rng.random_bool(0.8).then(|| rng.random::<f64>() * 10f64.powi(rng.random_range(-20..20)))).collect())
            .collect();
        let g = HeatmapGrid::new("pr_post", layers, steps, values).unwrap();
        prop_assert_eq!(HeatmapGrid::from_csv("pr_post", &g.to_csv().unwrap()).unwrap(), g);
    }
}

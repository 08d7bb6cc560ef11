use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::grid::{GridSpec, FREE, VEHICLE};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_set(n: usize, d: usize, shift: f64, seed: u64) -> FeatureSet {
    let mut r = rng(seed);
    let rows = (0..n)
        .map(|_| (0..d).map(|_| shift + Distribution::<f64>::sample(&StandardNormal, &mut r)).collect())
        .collect();
    FeatureSet::new(rows, "test").unwrap()
}

fn stats(mean: &[f64], diag: &[f64]) -> GaussianStats {
    GaussianStats {
        mean: DVector::from_column_slice(mean),
        cov: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
    }
}

#[test]
fn frechet_closed_forms() {
    let a = stats(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]);
    let b = stats(&[1.0, -2.0, 0.5], &[1.0, 1.0, 1.0]);
    assert!((frechet_distance(&a, &b).unwrap() - 5.25).abs() < 1e-5);
    let c = stats(&[0.0, 0.0], &[1.0, 4.0]);
    let d = stats(&[0.0, 0.0], &[9.0, 1.0]);
    assert!((frechet_distance(&c, &d).unwrap() - 5.0).abs() < 1e-5);
    assert!(frechet_distance(&c, &c).unwrap() <= 1e-6);
}

#[test]
fn frechet_with_rotated_covariances_matches_scalar_form() {
    // Σ₂ = Q diag Qᵀ with Σ₁ = a·I commute: Tr term is Σ(√a − √λ)²
    let th: f64 = 0.7;
    let q = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
    let s2 = &q * DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 5.0])) * q.transpose();
    let a = GaussianStats { mean: DVector::zeros(2), cov: DMatrix::identity(2, 2) * 3.0 };
    let b = GaussianStats { mean: DVector::zeros(2), cov: s2 };
    let want = (3f64.sqrt() - 2f64.sqrt()).powi(2) + (3f64.sqrt() - 5f64.sqrt()).powi(2);
    assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-5);
}

#[test]
fn sample_statistics() {
    let x = FeatureSet::new(vec![vec![1.0, 2.0], vec![3.0, 6.0]], "t").unwrap();
    let s = gaussian_stats(&x).unwrap();
    assert_eq!(s.mean.as_slice(), &[2.0, 4.0]);
    assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[2.0, 4.0, 4.0, 8.0]));
    let one = FeatureSet::new(vec![vec![1.0]], "t").unwrap();
    assert!(matches!(gaussian_stats(&one), Err(MetricError::TooFewPoints { .. })));
    assert!(FeatureSet::new(vec![vec![1.0], vec![1.0, 2.0]], "t").is_err());
}

#[test]
fn kid_identical_sets_is_exactly_zero() {
    let x = normal_set(40, 5, 0.0, 1);
    assert_eq!(kid(&x, &x, KidEstimator::Biased).unwrap(), 0.0);
}

#[test]
fn kid_two_point_sets_by_hand() {
    // d = 1, X = {0, 0}, Y = {m, m}: k(0,·) = 1, k(m,m) = (m² + 1)³
    for (m, prev) in [(1.0f64, 0.0f64), (2.0, 0.0), (100.0, 0.0)] {
        let x = FeatureSet::new(vec![vec![0.0], vec![0.0]], "t").unwrap();
        let y = FeatureSet::new(vec![vec![m], vec![m]], "t").unwrap();
        let want = 1.0 + (m * m + 1.0).powi(3) - 2.0;
        let got = kid(&x, &y, KidEstimator::Biased).unwrap();
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
        assert!(got > prev);
    }
    let far = |s: f64| {
        let x = normal_set(10, 3, 0.0, 2);
        let y = FeatureSet::new(normal_set(10, 3, 0.0, 3).rows.iter().map(|r| r.iter().map(|v| v * 1e-3 + s).collect()).collect(), "t").unwrap();
        let x = FeatureSet::new(x.rows.iter().map(|r| r.iter().map(|v| v * 1e-3).collect()).collect(), "t").unwrap();
        kid(&x, &y, KidEstimator::Biased).unwrap()
    };
    assert!(far(100.0) > far(10.0) && far(10.0) > far(1.0) && far(1.0) > 0.0);
}

#[test]
fn unbiased_kid_is_centered_on_matching_distributions() {
    let vals: Vec<f64> = (0..100)
        .map(|t| kid(&normal_set(30, 4, 0.0, 1000 + t), &normal_set(30, 4, 0.0, 5000 + t), KidEstimator::Unbiased).unwrap())
        .collect();
    let mean = vals.iter().sum::<f64>() / 100.0;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
    assert!(mean.abs() < 3.0 * sd / 10.0, "mean {mean}, se {}", sd / 10.0);
}

#[test]
fn kid_blocks_average() {
    let x = normal_set(120, 3, 0.0, 7);
    let y = normal_set(120, 3, 0.5, 8);
    let (m, s) = kid_blocks(&x, &y, 50).unwrap();
    let b0 = kid(
        &FeatureSet::new(x.rows[..50].to_vec(), "t").unwrap(),
        &FeatureSet::new(y.rows[..50].to_vec(), "t").unwrap(),
        KidEstimator::Unbiased,
    )
    .unwrap();
    let b1 = kid(
        &FeatureSet::new(x.rows[50..100].to_vec(), "t").unwrap(),
        &FeatureSet::new(y.rows[50..100].to_vec(), "t").unwrap(),
        KidEstimator::Unbiased,
    )
    .unwrap();
    assert!((m - (b0 + b1) / 2.0).abs() < 1e-12);
    assert!((s - (b0 - b1).abs() / 2.0).abs() < 1e-12);
    assert!(m > 0.0);
}

#[test]
fn precision_recall_extremes() {
    let x = normal_set(10, 2, 0.0, 9);
    assert_eq!(precision_recall(&x, &x, 3).unwrap(), (1.0, 1.0));
    let y = normal_set(10, 2, 1000.0, 10);
    assert_eq!(precision_recall(&x, &y, 3).unwrap(), (0.0, 0.0));
    let small = normal_set(3, 2, 0.0, 11);
    assert!(matches!(precision_recall(&small, &x, 3), Err(MetricError::TooFewPoints { .. })));
}

#[test]
fn precision_recall_balanced_on_matching_draws() {
    let x = normal_set(200, 2, 0.0, 12);
    let y = normal_set(200, 2, 0.0, 13);
    let (p, r) = precision_recall(&x, &y, 3).unwrap();
    assert!((p - r).abs() < 0.2, "{p} {r}");
}

#[test]
fn inception_score_cases() {
    let same = vec![vec![0.2, 0.3, 0.5]; 6];
    assert!((inception_style_score(&same).unwrap() - 1.0).abs() < 1e-12);
    let onehots: Vec<Vec<f64>> = (0..8).map(|i| (0..4).map(|j| if i % 4 == j { 1.0 } else { 0.0 }).collect()).collect();
    assert!((inception_style_score(&onehots).unwrap() - 4.0).abs() < 1e-12);
    let mixed = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
    let kl1 = (1.0f64 / 0.75).ln();
    let kl2 = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
    let want = (0.5 * kl1 + 0.5 * kl2).exp();
    assert!((inception_style_score(&mixed).unwrap() - want).abs() < 1e-12);
    assert!(matches!(inception_style_score(&[vec![0.5, 0.6]]), Err(MetricError::RowNotNormalized { row: 0, .. })));
}

#[test]
fn frame_index_rule() {
    assert_eq!(frame_indices(16, 5).unwrap(), vec![0, 4, 8, 11, 15]);
    assert_eq!(frame_indices(8, 8).unwrap(), (0..8).collect::<Vec<_>>());
    assert_eq!(frame_indices(8, 5).unwrap(), vec![0, 2, 4, 5, 7]);
    assert_eq!(frame_indices(8, 1).unwrap(), vec![0]);
    assert!(frame_indices(4, 5).is_err());
}

#[test]
fn clip_protocol_is_seeded() {
    let src = [8usize, 12, 16];
    let cfg = ProtocolConfig { clips_n: 50, clip_len: 8, frames_per_clip: 5 };
    let a = clip_protocol(&src, &cfg, 3).unwrap();
    assert_eq!(a, clip_protocol(&src, &cfg, 3).unwrap());
    assert_ne!(a, clip_protocol(&src, &cfg, 4).unwrap());
    for w in &a.windows {
        assert!(w.start + 8 <= src[w.source]);
    }
    assert_eq!(
        clip_protocol(&[8], &ProtocolConfig::paper(), 0),
        Err(MetricError::ClipTooShort { clip_len: 16, frames: 8 })
    );
    assert_eq!(ProtocolConfig::paper(), ProtocolConfig { clips_n: 10_000, clip_len: 16, frames_per_clip: 5 });
    assert_eq!(ProtocolConfig::desk().clips_n, 200);
}

#[test]
fn bev_features() {
    let spec = GridSpec::desk();
    let empty = SemanticGrid::free(spec.clone(), 3).unwrap();
    let f = bev_frame_features(&empty, 0).unwrap();
    assert_eq!(f.len(), frame_feature_width(11));
    let mut hist = vec![0.0; 11];
    hist[FREE as usize] = 1.0;
    assert_eq!(&f[..11], &hist[..]);
    assert_eq!(&f[11..], &[15.5, 15.5]);

    let mut moving = SemanticGrid::free(spec.clone(), 5).unwrap();
    for fr in 0..5 {
        for x in 0..3 {
            for y in 10..12 {
                moving.set(fr, 4 + fr + x, y, 1, VEHICLE);
            }
        }
    }
    let v = bev_video_features(&moving).unwrap();
    assert_eq!(v.len(), video_feature_width(11));
    assert_eq!(&v[13..], &[1.0, 0.0, 0.0, 0.0]);
    assert_eq!(bev_video_features(&empty).unwrap().len(), v.len());
    let p = bev_class_probs(&moving, 0).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn rubric_parsing() {
    let s = parse_rubric(r#"{"completeness":4,"structural":5,"semantic_alignment":3,"justification":"ok","mean":1.0}"#).unwrap();
    assert_eq!((s.completeness, s.structural, s.semantic_alignment), (4, 5, 3));
    assert_eq!(s.mean, 4.0);
    assert_eq!(s.justification, "ok");
    for bad in [
        r#"{"completeness":6,"structural":5,"semantic_alignment":3}"#,
        r#"{"completeness":0,"structural":5,"semantic_alignment":3}"#,
        r#"{"structural":5,"semantic_alignment":3}"#,
        r#"{"completeness":3.5,"structural":5,"semantic_alignment":3}"#,
        r#"{"completeness":"4","structural":5,"semantic_alignment":3}"#,
        "not json",
    ] {
        assert!(matches!(parse_rubric(bad), Err(MetricError::MalformedJudgeReply(_))), "{bad}");
    }
}

#[test]
fn stub_judge_is_deterministic() {
    let a = stub_judge("the vehicle stops");
    assert_eq!(a, stub_judge("the vehicle stops"));
    for axis in [a.completeness, a.structural, a.semantic_alignment] {
        assert!((1..=5).contains(&axis));
    }
    assert_eq!(a.mean, (a.completeness as f64 + a.structural as f64 + a.semantic_alignment as f64) / 3.0);
    let _ = String::new();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn frechet_is_symmetric(seed in 0u64..1000, shift in -3f64..3.0) {
        let a = gaussian_stats(&normal_set(20, 3, 0.0, seed)).unwrap();
        let b = gaussian_stats(&normal_set(20, 3, shift, seed + 1)).unwrap();
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() <= 1e-6 * ab.max(1.0));
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn unbiased_kid_is_symmetric(seed in 0u64..1000) {
        let x = normal_set(12, 3, 0.0, seed);
        let y = normal_set(9, 3, 0.3, seed + 7);
        let (a, b) = (kid(&x, &y, KidEstimator::Unbiased).unwrap(), kid(&y, &x, KidEstimator::Unbiased).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn precision_recall_swap(seed in 0u64..1000, shift in 0f64..2.0) {
        let x = normal_set(15, 2, 0.0, seed);
        let y = normal_set(12, 2, shift, seed + 3);
        let (p, r) = precision_recall(&x, &y, 3).unwrap();
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
        prop_assert_eq!(precision_recall(&y, &x, 3).unwrap(), (r, p));
    }

    #[test]
    fn inception_score_is_bounded(seed in 0u64..1000, n in 1usize..20) {
        let mut r = rng(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..5).map(|_| r.random::<f64>() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let is = inception_style_score(&rows).unwrap();
        prop_assert!((1.0 - 1e-9..=5.0 + 1e-9).contains(&is));
    }
}

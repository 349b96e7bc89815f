use mdkl::basis::{BasisSpec, RightBasis};
use mdkl::measurement::{
    estimate_projection_stats, MeasurementDataset, MeasurementOperator, OperatorKind, OperatorSampler,
    ProjectedMeasurement, SamplerSpec,
};
use mdkl::rng::{Purpose, StreamSeed};
use mdkl::{Error, GaussianMixture};
use proptest::prelude::*;

fn sampler(kind: OperatorKind, dim: usize, seed: u64) -> OperatorSampler {
    OperatorSampler::new(SamplerSpec::new(kind), dim, StreamSeed::new(seed)).unwrap()
}

fn mean_projection(s: &OperatorSampler, draws: u64) -> Vec<f64> {
    let mut acc = vec![0.0; s.dim()];
    for i in 0..draws {
        for (a, p) in acc.iter_mut().zip(s.sample_operator(i).projection()) {
            *a += p;
        }
    }
    acc.iter().map(|a| a / draws as f64).collect()
}

#[test]
fn full_mask_is_identity_projection() {
    let s = sampler(OperatorKind::CoordinateMask { keep_prob: 1.0 }, 7, 0);
    for i in 0..20 {
        assert_eq!(s.sample_operator(i).projection(), vec![1.0; 7]);
    }
    let stats = estimate_projection_stats(&s, 64).unwrap();
    assert_eq!(stats.ep_diag, vec![1.0; 7]);
    assert_eq!(stats.w_diag, vec![1.0; 7]);
}

#[test]
fn patch_masks_keep_half_of_each_pixel() {
    let s = sampler(OperatorKind::PatchInpainting { patch: 4, keep_prob: 0.5 }, 64, 3);
    let ep = mean_projection(&s, 10_000);
    assert!(ep.iter().all(|e| (e - 0.5).abs() < 0.02), "{ep:?}");
    // whole patches move together
    let op = s.sample_operator(11);
    assert_eq!(op.is_observed(0), op.is_observed(3 * 8 + 3));
    assert!(OperatorSampler::new(
        SamplerSpec::new(OperatorKind::PatchInpainting { patch: 3, keep_prob: 0.5 }),
        64,
        StreamSeed::new(0)
    )
    .is_err());
}

#[test]
fn band_subsample_counts_and_low_block() {
    let s = sampler(OperatorKind::BandSubsample { low: 30, random: 50 }, 320, 1);
    for i in 0..50 {
        assert_eq!(s.sample_operator(i).rank(), 80);
    }
    let stats = estimate_projection_stats(&s, 512).unwrap();
    assert!(stats.ep_diag[..30].iter().all(|e| *e == 1.0));
}

#[test]
fn weighting_for_quarter_masks() {
    let check = |dim: usize, draws: usize| {
        let s = sampler(OperatorKind::CoordinateMask { keep_prob: 0.25 }, dim, 0);
        let stats = estimate_projection_stats(&s, draws).unwrap();
        for (e, w) in stats.ep_diag.iter().zip(&stats.w_diag) {
            assert!((w - e.powf(-1.5)).abs() < 1e-12 * w);
            assert!((w - 8.0).abs() / 8.0 < 0.05, "dim {dim}, {draws} draws: {w}");
        }
    };
    // 5% on W is about two standard errors per coordinate at 10⁴ draws
    check(4, 10_000);
    check(12, 100_000);
}

#[test]
fn to_projected_examples() {
    let mut rng = StreamSeed::new(0).stream(Purpose::MeasurementNoise, 0, 0);
    let full = sampler(OperatorKind::CoordinateMask { keep_prob: 1.0 }, 4, 0).sample_operator(0);
    let x = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(full.to_projected(&x, 0.0, &mut rng).unwrap().ybar, x.to_vec());

    let fixed = sampler(OperatorKind::FixedSupports { supports: vec![vec![0, 2]] }, 4, 0).sample_operator(0);
    assert_eq!(fixed.to_projected(&x, 0.0, &mut rng).unwrap().ybar, vec![1.0, 0.0, 3.0, 0.0]);

    let dense = OperatorSampler::new(
        SamplerSpec::new(OperatorKind::CoordinateMask { keep_prob: 0.5 }).with_basis(BasisSpec::DenseOrthogonal { seed: 4 }),
        4,
        StreamSeed::new(1),
    )
    .unwrap();
    let op = dense.sample_operator(3);
    assert_eq!(op.to_projected(&[0.0; 4], 0.0, &mut rng).unwrap().ybar, vec![0.0; 4]);
    assert!(op.to_projected(&[0.0; 3], 0.0, &mut rng).is_err());
}

#[test]
fn measurement_noise_scales_with_singular_value() {
    let basis = RightBasis::identity(2);
    let op = MeasurementOperator::new(basis, vec![2.0, 0.0], 0).unwrap();
    let mut rng = StreamSeed::new(3).stream(Purpose::MeasurementNoise, 0, 0);
    let draws: Vec<Vec<f64>> = (0..20_000)
        .map(|_| op.to_projected(&[1.0, 5.0], 0.4, &mut rng).unwrap().ybar)
        .collect();
    let var = draws.iter().map(|y| (y[0] - 1.0).powi(2)).sum::<f64>() / draws.len() as f64;
    assert!((var - 0.04).abs() < 0.003, "{var}");
    assert!(draws.iter().all(|y| y[1] == 0.0));
}

#[test]
fn diffusion_noise_only_on_support() {
    let s = sampler(OperatorKind::FixedSupports { supports: vec![vec![0, 3, 4]] }, 6, 0);
    let op = s.sample_operator(0);
    let mut rng = StreamSeed::new(0).stream(Purpose::MeasurementNoise, 0, 0);
    let meas = op.to_projected(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 0.0, &mut rng).unwrap();
    let sigma = 0.7;
    let n = 100_000;
    let mut sum_sq = vec![0.0; 6];
    for j in 0..n {
        let mut rng = StreamSeed::new(1).stream(Purpose::DiffusionNoise, 0, j);
        let ys = op.add_diffusion_noise(&meas, sigma, &mut rng);
        for i in 0..6 {
            if op.is_observed(i) {
                sum_sq[i] += (ys[i] - meas.ybar[i]).powi(2);
            } else {
                assert_eq!(ys[i], 0.0);
            }
        }
    }
    for i in [0, 3, 4] {
        let var = sum_sq[i] / n as f64;
        assert!((var - sigma * sigma).abs() < 0.01, "{var}");
    }
    let mut rng = StreamSeed::new(1).stream(Purpose::DiffusionNoise, 0, 0);
    let tiny = op.add_diffusion_noise(&meas, 1e-12, &mut rng);
    for (a, b) in tiny.iter().zip(&meas.ybar) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn lift_examples() {
    let id = RightBasis::identity(3);
    let op = MeasurementOperator::new(id, vec![1.0; 3], 0).unwrap();
    assert_eq!(op.lift(&[1.0, -2.0, 3.0]), vec![1.0, -2.0, 3.0]);

    let h = RightBasis::hadamard(8).unwrap();
    let op = MeasurementOperator::new(h, vec![1.0; 8], 0).unwrap();
    let mut e0 = vec![0.0; 8];
    e0[0] = 1.0;
    for c in op.lift(&e0) {
        assert!((c - 1.0 / 8f64.sqrt()).abs() < 1e-15);
    }

    let dense = RightBasis::dense_orthogonal(6, 9);
    let v = vec![0.3, -1.0, 2.0, 0.0, 5.0, -0.5];
    let op = MeasurementOperator::new(dense.clone(), vec![1.0; 6], 0).unwrap();
    let back = dense.analyze(&op.lift(&v));
    for (a, b) in back.iter().zip(&v) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn span_violation_names_the_missing_coordinate() {
    let s = sampler(OperatorKind::FixedSupports { supports: vec![vec![0, 1], vec![1, 3]] }, 4, 0);
    match estimate_projection_stats(&s, 100) {
        Err(Error::SpanViolation { coordinate, draws }) => assert_eq!((coordinate, draws), (2, 100)),
        other => panic!("{other:?}"),
    }
    let e = Error::SpanViolation { coordinate: 2, draws: 100 };
    assert!(e.is_assumption_violation());
}

#[test]
fn operators_share_the_sampler_basis() {
    let s = OperatorSampler::new(
        SamplerSpec::new(OperatorKind::CoordinateMask { keep_prob: 0.3 }).with_basis(BasisSpec::Hadamard),
        16,
        StreamSeed::new(5),
    )
    .unwrap();
    let id = s.basis().id();
    assert!((0..100).all(|i| s.sample_operator(i).id().basis == id));
}

#[test]
fn datasets_reject_foreign_or_inconsistent_records() {
    let p = GaussianMixture::gaussian(vec![0.0; 4], 1.0).unwrap();
    let ident = sampler(OperatorKind::CoordinateMask { keep_prob: 0.5 }, 4, 1);
    let data = MeasurementDataset::from_prior(&p, &ident, 8, 0.0, StreamSeed::new(2)).unwrap();

    let mut records = data.records().to_vec();
    records[3].operator.basis ^= 1;
    assert!(matches!(
        MeasurementDataset::from_records(&ident, records),
        Err(Error::BasisMismatch { .. })
    ));

    let mut records = data.records().to_vec();
    let op = ident.sample_operator(records[0].operator.index);
    let hole = (0..4).find(|&i| !op.is_observed(i));
    if let Some(i) = hole {
        records[0].ybar[i] = 1.0;
        assert!(MeasurementDataset::from_records(&ident, records).is_err());
    }

    let ok = MeasurementDataset::from_records(&ident, data.records().to_vec()).unwrap();
    assert_eq!(ok.records(), data.records());
    let text = serde_json::to_string(&data.records()[0]).unwrap();
    let back: ProjectedMeasurement = serde_json::from_str(&text).unwrap();
    assert_eq!(back, data.records()[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_projection_idempotent(keep in 0.0f64..1.0, index in 0u64..10_000, v in prop::collection::vec(-10.0f64..10.0, 9)) {
        let s = sampler(OperatorKind::CoordinateMask { keep_prob: keep }, 9, 7);
        let op = s.sample_operator(index);
        let once = op.project(&v);
        prop_assert_eq!(op.project(&once), once);
        prop_assert!(op.projection().iter().all(|p| *p == 0.0 || *p == 1.0));
    }

    #[test]
    fn prop_operator_determinism(keep in 0.0f64..1.0, seed in 0u64..1000, index in 0u64..1_000_000) {
        let a = sampler(OperatorKind::CoordinateMask { keep_prob: keep }, 16, seed);
        let b = sampler(OperatorKind::CoordinateMask { keep_prob: keep }, 16, seed);
        prop_assert_eq!(a.sample_operator(index).projection(), b.sample_operator(index).projection());
        prop_assert_eq!(a.id(), b.id());
    }

    #[test]
    fn prop_bases_preserve_norms(seed in 0u64..1000, v in prop::collection::vec(-10.0f64..10.0, 16)) {
        let n: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for b in [RightBasis::identity(16), RightBasis::dense_orthogonal(16, seed), RightBasis::hadamard(16).unwrap()] {
            let a = b.analyze(&v);
            let m: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((m - n).abs() < 1e-10);
            let back = b.synthesize(&a);
            for (x, y) in back.iter().zip(&v) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn prop_projected_zero_off_support(keep in 0.0f64..1.0, index in 0u64..1000, sz in 0.0f64..1.0) {
        let s = sampler(OperatorKind::CoordinateMask { keep_prob: keep }, 8, 4);
        let op = s.sample_operator(index);
        let mut rng = StreamSeed::new(index).stream(Purpose::MeasurementNoise, index, 0);
        let y = op.to_projected(&[1.0; 8], sz, &mut rng).unwrap();
        for i in 0..8 {
            if !op.is_observed(i) {
                prop_assert_eq!(y.ybar[i], 0.0);
            }
        }
    }
}

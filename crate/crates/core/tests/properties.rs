use curate_core::augment::{make_pair, TransformSpec};
use curate_core::autodiff::{Graph, Tensor};
use curate_core::config::{DataConfig, DatasetKind};
use curate_core::curation::FeatureSource;
use curate_core::curation::{frd, gaussian_stats, score_pair, CurationConfig};
use curate_core::data::{iterate_batches, make_synthetic, BatchPlan, Split};
use curate_core::eval::{extract_embeddings, knn_probe, linear_probe, LinearProbeConfig};
use curate_core::losses::{nt_xent, regularized_loss, regularizer_batch, LossConfig, RegularizerKind};
use curate_core::model::{checkpoint_bytes, EncoderConfig, EncoderKind, ModelParams};
use curate_core::trainer::{pretrain, StepAction, TrainConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| tensor(rows, cols, d))
}

fn orthogonal(d: usize, seed: Vec<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, &seed).qr().q()
}

fn rotate(t: &Tensor, q: &DMatrix<f64>, shift: f64) -> Tensor {
    let (n, d) = (t.rows(), t.row_len());
    let m = DMatrix::from_row_slice(n, d, t.data()) * q;
    let data = (0..n)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)] + shift)
        .collect();
    tensor(n, d, data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permutation_is_a_bijection(
        (count, batch) in (1usize..300).prop_flat_map(|c| (Just(c), 1..=c.min(64))),
        seed in any::<u64>(),
        epoch in 0u64..50,
    ) {
        let plan = BatchPlan { seed, batch_size: batch, drop_last: true };
        let mut p = plan.permutation(count, epoch);
        prop_assert_eq!(&p, &plan.permutation(count, epoch));
        p.sort_unstable();
        prop_assert_eq!(p, (0..count).collect::<Vec<_>>());
        let batches = iterate_batches(count, &plan, epoch).unwrap();
        prop_assert_eq!(batches.len(), count / batch);
        prop_assert!(batches.iter().all(|b| b.len() == batch));
    }

    #[test]
    fn nt_xent_nonnegative_and_rotation_invariant(
        z1 in matrix(4, 3), z2 in matrix(4, 3), q in prop::collection::vec(-1.0f64..1.0, 9), tau in 0.1f64..2.0,
    ) {
        let q = orthogonal(3, q);
        let base = nt_xent(&z1, &z2, tau).unwrap();
        prop_assert!(base >= 0.0);
        let turned = nt_xent(&rotate(&z1, &q, 0.0), &rotate(&z2, &q, 0.0), tau).unwrap();
        prop_assert!((base - turned).abs() <= 1e-10, "{} vs {}", base, turned);
    }

    #[test]
    fn total_is_ntxent_plus_weighted_regularizer(z1 in matrix(5, 4), z2 in matrix(5, 4), lambda in 0.0f64..3.0, k in 0usize..4) {
        let cfg = LossConfig { lambda, regularizer: RegularizerKind::ALL[k], ..LossConfig::default() };
        let b = regularized_loss(&z1, &z2, &cfg).unwrap();
        prop_assert_eq!(b.total - (b.nt_xent + lambda * b.regularizer), 0.0);
    }

    #[test]
    fn huber_matches_l2_inside_delta(z1 in matrix(4, 3), z2 in matrix(4, 3)) {
        // unit-norm rows differ by at most 2, so δ = 2.5 keeps every |d| quadratic
        let huber = LossConfig { huber_delta: 2.5, ..LossConfig::default() };
        let l2 = LossConfig { regularizer: RegularizerKind::L2, ..huber };
        prop_assert_eq!(regularizer_batch(&z1, &z2, &huber).unwrap(), regularizer_batch(&z1, &z2, &l2).unwrap());
    }

    #[test]
    fn frd_symmetric_nonnegative_and_isometry_invariant(
        a in matrix(24, 3), b in matrix(24, 3), q in prop::collection::vec(-1.0f64..1.0, 9), shift in -5.0f64..5.0,
    ) {
        let cfg = CurationConfig::default();
        let ab = score_pair(&a, &b, &cfg).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - score_pair(&b, &a, &cfg).unwrap()).abs() <= 1e-8);
        prop_assert!(score_pair(&a, &a, &cfg).unwrap() <= 1e-8);
        let q = orthogonal(3, q);
        let moved = score_pair(&rotate(&a, &q, shift), &rotate(&b, &q, shift), &cfg).unwrap();
        prop_assert!((ab - moved).abs() <= 1e-6, "{} vs {}", ab, moved);
    }

    #[test]
    fn covariance_is_symmetric_with_shrinkage_floor(a in matrix(12, 5)) {
        let s = gaussian_stats(&a, 1e-6).unwrap();
        prop_assert!((&s.covariance - s.covariance.transpose()).amax() <= 1e-12);
        let min = s.covariance.clone().symmetric_eigenvalues().min();
        prop_assert!(min >= 1e-6 - 1e-10);
        prop_assert!(frd(&s, &s).unwrap() <= 1e-8);
    }
}

#[test]
fn augmentation_is_deterministic_in_range_and_paired() {
    let ds = make_synthetic(3, 6, 12, 1).unwrap();
    let spec = TransformSpec {
        norm: None,
        ..TransformSpec::default()
    };
    let idx = vec![4, 0, 17, 9, 9];
    for seed in 0..20 {
        let a = make_pair(&ds, &idx, &spec, seed).unwrap();
        let b = make_pair(&ds, &idx, &spec, seed).unwrap();
        assert_eq!(a.view1.data(), b.view1.data());
        assert_eq!(a.view2.data(), b.view2.data());
        assert_eq!(a.source_indices, idx);
        for v in a.view1.data().iter().chain(a.view2.data()) {
            assert!((0.0..=1.0).contains(v), "{v}");
        }
    }
}

#[test]
fn forward_is_pure_and_repeatable() {
    let cfg = EncoderConfig {
        input: (3, 8, 8),
        conv_channels: vec![4, 8],
        hidden_dim: 16,
        projection_dim: 8,
        ..EncoderConfig::default()
    };
    let model = ModelParams::init(&cfg).unwrap();
    let before = checkpoint_bytes(&model);
    let x = Tensor::new(vec![3, 3, 8, 8], (0..576).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let (h1, z1) = model.embed(&x).unwrap();
    let (h2, z2) = model.embed(&x).unwrap();
    assert_eq!(h1.data(), h2.data());
    assert_eq!(z1.data(), z2.data());
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    model
        .forward(&mut g, xv, curate_core::model::Mode::Train, true)
        .unwrap();
    assert_eq!(checkpoint_bytes(&model), before);
}

#[test]
fn probes_leave_the_encoder_alone_and_are_reproducible() {
    let ds = make_synthetic(4, 20, 8, 2).unwrap();
    let cfg = EncoderConfig {
        kind: EncoderKind::Mlp,
        input: (3, 8, 8),
        hidden_dim: 16,
        projection_dim: 8,
        ..EncoderConfig::default()
    };
    let model = ModelParams::init(&cfg).unwrap();
    let before = checkpoint_bytes(&model);
    let spec = TransformSpec::default();
    let emb = extract_embeddings(&model, &ds, &spec, FeatureSource::Encoder, "m").unwrap();
    assert_eq!(knn_probe(&emb, &emb, 1).unwrap(), 1.0);
    let lp = LinearProbeConfig {
        epochs: 5,
        ..LinearProbeConfig::default()
    };
    let a = linear_probe(&emb, &emb, &lp).unwrap();
    assert_eq!(a.to_bits(), linear_probe(&emb, &emb, &lp).unwrap().to_bits());
    assert_eq!(checkpoint_bytes(&model), before);
}

/// The default configuration on the synthetic dataset.
fn default_synthetic_run() -> curate_core::trainer::PretrainOutcome {
    let data = DataConfig {
        dataset: DatasetKind::Synthetic,
        ..DataConfig::default()
    };
    let ds = data.load(None, Split::Train).unwrap();
    pretrain(&ds, &TrainConfig::desk(), None, &mut |_| {}).unwrap()
}

#[test]
fn early_training_behaviour_on_synthetic_data() {
    let out = default_synthetic_run();
    let means: Vec<f64> = out.epochs.iter().take(10).map(|e| e.mean_total).collect();
    let rises = means.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(rises <= 1, "epoch means {means:?}");

    let cal = TrainConfig::desk().curation.calibration_epoch;
    let first: Vec<_> = out
        .records
        .iter()
        .filter(|r| r.epoch == cal + 1 && r.attempt == 1)
        .collect();
    let accepted = first.iter().filter(|r| r.action == StepAction::Update).count();
    let rate = accepted as f64 / first.len() as f64;
    assert!(
        (0.30..=0.90).contains(&rate),
        "first gated epoch acceptance {accepted}/{}",
        first.len()
    );
    assert!(out
        .records
        .iter()
        .filter(|r| r.epoch <= cal)
        .all(|r| r.decision.is_none()));
}

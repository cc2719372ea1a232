use super::*;
use crate::annotations::SampleAnnotation;
use crate::fixtures::{self, random_batch, RandomBatchSpec};
use proptest::prelude::*;

fn tau(t: f64) -> LossConfig {
    LossConfig::default().with_tau(t)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn unit_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn naive_sims(batch: &AlignmentBatch, level: usize) -> Vec<Vec<f64>> {
    let v = unit_rows(batch.images());
    let t = unit_rows(batch.levels()[level].texts());
    v.iter()
        .map(|vi| {
            t.iter()
                .map(|tj| vi.iter().zip(tj).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

/// Direct transcription: every (sample, text) pair of the batch appears in the
/// image-to-text denominator, every image in the text-to-image one.
fn brute_soft_clip(batch: &AlignmentBatch, level: usize, tau: f64) -> f64 {
    let s = naive_sims(batch, level);
    let lvl = &batch.levels()[level];
    let pairs: Vec<(usize, usize)> = lvl
        .assignments()
        .iter()
        .enumerate()
        .flat_map(|(n, a)| a.iter().map(move |&t| (n, t)))
        .collect();
    let mut total = 0.0;
    for (i, (a, w)) in lvl.assignments().iter().zip(lvl.weights()).enumerate() {
        for (&j, &wk) in a.iter().zip(w) {
            let num = (s[i][j] / tau).exp();
            let den_i2t: f64 = pairs.iter().map(|&(_, t)| (s[i][t] / tau).exp()).sum();
            let den_t2i: f64 = (0..batch.len()).map(|n| (s[n][j] / tau).exp()).sum();
            total += -wk * (num / den_i2t).ln() - wk * (num / den_t2i).ln();
        }
    }
    total / (2.0 * pairs.len() as f64)
}

fn brute_clip(batch: &AlignmentBatch, level: usize, tau: f64, dir: ClipDirection) -> f64 {
    let s = naive_sims(batch, level);
    let lvl = &batch.levels()[level];
    let n = batch.len();
    let d: Vec<usize> = (0..n).map(|i| lvl.designated(i)).collect();
    let mut total = 0.0;
    for i in 0..n {
        let num = (s[i][d[i]] / tau).exp();
        let den: f64 = match dir {
            ClipDirection::ImageToText => (0..n).map(|j| (s[i][d[j]] / tau).exp()).sum(),
            ClipDirection::TextToImage => (0..n).map(|j| (s[j][d[i]] / tau).exp()).sum(),
        };
        total -= (num / den).ln();
    }
    total / n as f64
}

fn single_label(spec: RandomBatchSpec) -> AlignmentBatch {
    random_batch(&RandomBatchSpec {
        max_labels: 1,
        random_weights: false,
        ..spec
    })
    .unwrap()
}

fn permuted(batch: &AlignmentBatch, order: &[usize]) -> AlignmentBatch {
    let levels = batch
        .levels()
        .iter()
        .map(|l| {
            LevelBatch::new(
                l.texts().clone(),
                order.iter().map(|&i| l.assignments()[i].clone()).collect(),
                order.iter().map(|&i| l.weights()[i].clone()).collect(),
            )
            .unwrap()
        })
        .collect();
    AlignmentBatch::new(batch.images().select_rows(order), levels).unwrap()
}

#[test]
fn clip_examples() {
    let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    let v = clip_loss(&fixtures::diagonal_pair(), 0, &tau(1.0))
        .unwrap()
        .value;
    assert!(close(v, expected, 1e-15));
    assert!(close(v, 0.313262, 1e-6));
    assert_eq!(
        clip_loss(&fixtures::single_pair(), 0, &tau(0.07))
            .unwrap()
            .value,
        0.0
    );
    let v = clip_loss(&fixtures::zero_logit_pair(), 0, &tau(0.07))
        .unwrap()
        .value;
    assert!(close(v, 2f64.ln(), 1e-15));
}

#[test]
fn clip_strict_mode_rejects_multi_label() {
    let b = random_batch(&RandomBatchSpec {
        max_labels: 3,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let strict = LossConfig {
        strict_single_label: true,
        ..Default::default()
    };
    assert!(clip_loss(&b, 0, &LossConfig::default()).is_ok());
    assert!(matches!(
        clip_loss(&b, 0, &strict),
        Err(LossError::MultiLabelAmbiguity { level: 0, .. })
    ));
    assert!(clip_loss(&single_label(RandomBatchSpec::default()), 0, &strict).is_ok());
}

#[test]
fn soft_clip_examples() {
    assert_eq!(
        soft_clip_loss(&fixtures::single_pair(), 0, &tau(0.07))
            .unwrap()
            .value,
        0.0
    );
    let v = soft_clip_loss(&fixtures::diagonal_pair(), 0, &tau(1.0))
        .unwrap()
        .value;
    assert!(close(v, -(1f64.exp() / (1f64.exp() + 1.0)).ln(), 1e-15));
    let v = soft_clip_loss(&fixtures::zero_logit_pair(), 0, &tau(0.07))
        .unwrap()
        .value;
    assert!(close(v, 2f64.ln(), 1e-15));
}

#[test]
fn pointwise_examples() {
    // Image orthogonal to its only text: x = 0, y = 1.
    let level =
        LevelBatch::uniform(Matrix::from_rows(&[[0.0, 1.0]]).unwrap(), vec![vec![0]]).unwrap();
    let b = AlignmentBatch::new(Matrix::from_rows(&[[1.0, 0.0]]).unwrap(), vec![level]).unwrap();
    let cfg = LossConfig::default();
    assert!(close(
        pointwise_loss(&b, 0, &cfg).unwrap().value,
        2f64.ln(),
        1e-15
    ));

    let v = pointwise_loss(&fixtures::zero_logit_pair(), 0, &cfg)
        .unwrap()
        .value;
    assert!(close(v, 4.0 * 2f64.ln() / 2.0, 1e-15));
    assert!(close(v, 1.386294, 1e-6));

    // Matched pair with a growing logit scale: value falls towards 0.
    let b = fixtures::single_pair();
    let mut last = f64::INFINITY;
    for t in [1.0, 0.1, 0.01, 0.001] {
        let v = pointwise_loss(
            &b,
            0,
            &LossConfig {
                pointwise_tau: Some(t),
                ..cfg
            },
        )
        .unwrap()
        .value;
        assert!(v < last);
        last = v;
    }
    assert!(last < 1e-300);
}

#[test]
fn granularity_distribution_examples() {
    // Four samples, every similarity zero, one level: uniform quarter weights.
    let mut images = Matrix::zeros(4, 8);
    let mut texts = Matrix::zeros(4, 8);
    for i in 0..4 {
        images.set(i, i, 1.0);
        texts.set(i, 4 + i, 1.0);
    }
    let level = LevelBatch::uniform(texts, (0..4).map(|i| vec![i]).collect()).unwrap();
    let b = AlignmentBatch::new(images, vec![level]).unwrap();
    let d = granularity_distributions(&b, 0, &LossConfig::default()).unwrap();
    assert_eq!(d[0].probs(), &[0.25; 4]);

    let d =
        granularity_distributions(&fixtures::diagonal_pair(), 0, &LossConfig::default()).unwrap();
    assert!(d[0].probs()[0] > 1.0 - 1e-6);

    let b = fixtures::identical_levels();
    let d = granularity_distributions(&b, 1, &LossConfig::default()).unwrap();
    assert_eq!(d[0], d[1]);
    assert_eq!(
        smooth_kl_loss(&b, &LossConfig::default()).unwrap().value,
        0.0
    );
    assert!(granularity_distributions(&b, 2, &LossConfig::default()).is_err());
}

#[test]
fn smooth_kl_examples() {
    let one_hot = |i: usize| {
        let mut p = vec![0.0; 2];
        p[i] = 1.0;
        ProbabilityVector::new(p).unwrap()
    };
    let v = smooth_kl_divergence(&[one_hot(0), one_hot(1)]).unwrap();
    assert!(close(v, 2.0 * 2f64.ln(), 1e-15));
    assert!(close(v, 1.386294, 1e-6));
    assert!(matches!(
        smooth_kl_divergence(&[one_hot(0)]),
        Err(LossError::SingleGranularity)
    ));
    let three = ProbabilityVector::new(vec![0.5, 0.25, 0.25]).unwrap();
    assert!(matches!(
        smooth_kl_divergence(&[one_hot(0), three]),
        Err(LossError::LevelMismatch {
            expected: 2,
            found: 3
        })
    ));
}

#[test]
fn smooth_kl_vanishes_with_perturbation() {
    let base = [0.1, 0.4, 0.2, 0.3];
    let mut last = f64::INFINITY;
    for delta in [0.1, 0.01, 0.001, 1e-4, 1e-5] {
        let bent = [0.1 + delta, 0.4 - delta, 0.2, 0.3];
        let ps = [base, base, bent].map(|p| ProbabilityVector::new(p.to_vec()).unwrap());
        let v = smooth_kl_divergence(&ps).unwrap();
        assert!(v > 0.0 && v < last, "{delta}: {v}");
        last = v;
    }
    assert!(last < 1e-9);
}

#[test]
fn smooth_kl_requires_two_levels() {
    assert!(matches!(
        smooth_kl_loss(&fixtures::diagonal_pair(), &LossConfig::default()),
        Err(LossError::SingleGranularity)
    ));
}

#[test]
fn mgll_examples() {
    let b = random_batch(&RandomBatchSpec {
        seed: 5,
        levels: 3,
        ..Default::default()
    })
    .unwrap();
    let cfg = LossConfig::default();
    let masked = mgll_loss(&b, &cfg.with_alphas(0.0, 1.0, 0.0))
        .unwrap()
        .value;
    assert_eq!(masked, loss_value(&b, &cfg, LossKind::Pointwise).unwrap());
    assert_eq!(
        mgll_loss(&b, &cfg.with_alphas(0.0, 0.0, 0.0))
            .unwrap()
            .value,
        0.0
    );

    let single = random_batch(&RandomBatchSpec {
        seed: 5,
        levels: 1,
        ..Default::default()
    })
    .unwrap();
    let v = mgll_loss(&single, &cfg).unwrap().value;
    let expected = 0.5 * soft_clip_loss(&single, 0, &cfg).unwrap().value
        + pointwise_loss(&single, 0, &cfg).unwrap().value;
    assert!(close(v, expected, 1e-14));
}

#[test]
fn config_validation() {
    let b = fixtures::diagonal_pair();
    for cfg in [
        tau(0.0),
        tau(-1.0),
        tau(f64::NAN),
        LossConfig::default().with_alphas(-1.0, 1.0, 1.0),
        LossConfig {
            pointwise_tau: Some(0.0),
            ..Default::default()
        },
    ] {
        assert!(matches!(
            mgll_loss(&b, &cfg),
            Err(LossError::InvalidConfig(_))
        ));
    }
    assert!(matches!(
        soft_clip_loss(&b, 3, &LossConfig::default()),
        Err(LossError::LevelOutOfRange {
            level: 3,
            levels: 1
        })
    ));
}

#[test]
fn batch_validation() {
    let texts = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
    assert!(LevelBatch::uniform(texts.clone(), vec![vec![1]]).is_err());
    assert!(LevelBatch::uniform(texts.clone(), vec![vec![]]).is_err());
    assert!(LevelBatch::new(texts.clone(), vec![vec![0]], vec![vec![0.5]]).is_err());
    let level = LevelBatch::uniform(texts, vec![vec![0], vec![0]]).unwrap();
    let images = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
    assert!(AlignmentBatch::new(images, vec![level]).is_err());
    assert!(matches!(
        AlignmentBatch::new(Matrix::zeros(0, 2), vec![]),
        Err(LossError::EmptyBatch)
    ));

    let zero_row = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
    let level =
        LevelBatch::uniform(Matrix::from_rows(&[[1.0, 0.0]]).unwrap(), vec![vec![0]]).unwrap();
    let b = AlignmentBatch::new(zero_row, vec![level]).unwrap();
    assert!(matches!(
        soft_clip_loss(&b, 0, &LossConfig::default()),
        Err(LossError::DegenerateEmbedding { .. })
    ));
}

#[test]
fn from_annotations_builds_weights_and_labels() {
    let anns = vec![
        SampleAnnotation {
            sample_id: "a".into(),
            labels_per_level: vec![vec![0, 1]],
        },
        SampleAnnotation {
            sample_id: "b".into(),
            labels_per_level: vec![vec![1]],
        },
    ];
    let images = Matrix::from_rows(&[[2.0, 0.0], [0.0, 3.0]]).unwrap();
    let texts = vec![Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]).unwrap()];
    let b = AlignmentBatch::from_annotations(&anns, &images, &texts, WeightsMode::Uniform).unwrap();
    assert_eq!(b.levels()[0].weights(), &[vec![0.5, 0.5], vec![1.0]]);
    assert_eq!(b.match_labels(0).unwrap().data(), &[1.0, 1.0, 0.0, 1.0]);
    assert_eq!(b.images().row(0), &[1.0, 0.0]);
    let b = AlignmentBatch::from_annotations(&anns, &images, &texts, WeightsMode::Cooccurrence)
        .unwrap();
    // Label 1 is twice as frequent as label 0.
    let w = &b.levels()[0].weights()[0];
    assert!(close(w[0], 1.0 / 3.0, 1e-15) && close(w[1], 2.0 / 3.0, 1e-15));
}

#[test]
fn shift_invariance_of_soft_clip_kernel() {
    let b = random_batch(&RandomBatchSpec {
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let cos = Cosines::new(&b).unwrap();
    let base = terms::soft_clip(&cos.sims[0], &b.levels()[0], 0.07, None);
    for c in [-0.5, 0.25, 3.0] {
        let mut shifted = cos.sims[0].clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += c);
        let v = terms::soft_clip(&shifted, &b.levels()[0], 0.07, None);
        assert!(close(v, base, 1e-12), "{c}: {v} vs {base}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soft_clip_matches_direct_transcription(seed in any::<u64>(), n in 1usize..9, t in 0.05f64..1.0) {
        let b = random_batch(&RandomBatchSpec { seed, samples: n, ..Default::default() }).unwrap();
        for g in 0..b.granularity() {
            let fast = soft_clip_loss(&b, g, &tau(t)).unwrap().value;
            let slow = brute_soft_clip(&b, g, t);
            prop_assert!(close(fast, slow, 1e-12 * slow.abs().max(1.0)), "{fast} vs {slow}");
        }
    }

    #[test]
    fn clip_matches_direct_transcription(seed in any::<u64>(), n in 1usize..9) {
        let b = random_batch(&RandomBatchSpec { seed, samples: n, ..Default::default() }).unwrap();
        for dir in [ClipDirection::ImageToText, ClipDirection::TextToImage] {
            let fast = clip_loss_directional(&b, 0, &tau(0.07), dir).unwrap().value;
            let slow = brute_clip(&b, 0, 0.07, dir);
            prop_assert!(close(fast, slow, 1e-12 * slow.abs().max(1.0)));
        }
    }

    #[test]
    fn soft_clip_reduces_to_symmetric_clip(seed in any::<u64>(), n in 1usize..9) {
        let b = single_label(RandomBatchSpec { seed, samples: n, ..Default::default() });
        let cfg = tau(0.07);
        for g in 0..b.granularity() {
            let soft = soft_clip_loss(&b, g, &cfg).unwrap().value;
            let i2t = clip_loss_directional(&b, g, &cfg, ClipDirection::ImageToText).unwrap().value;
            let t2i = clip_loss_directional(&b, g, &cfg, ClipDirection::TextToImage).unwrap().value;
            prop_assert!(close(soft, 0.5 * (i2t + t2i), 1e-12));
        }
    }

    #[test]
    fn grouped_kl_matches_explicit_distributions(seed in any::<u64>(), n in 1usize..9, levels in 2usize..4) {
        let b = random_batch(&RandomBatchSpec { seed, samples: n, levels, texts: 3, ..Default::default() })
            .unwrap();
        let cfg = LossConfig::default();
        let explicit: f64 = (0..n)
            .map(|i| smooth_kl_divergence(&granularity_distributions(&b, i, &cfg).unwrap()).unwrap())
            .sum::<f64>()
            / n as f64;
        let grouped = smooth_kl_loss(&b, &cfg).unwrap().value;
        prop_assert!(close(grouped, explicit, 1e-12 * explicit.max(1.0)), "{grouped} vs {explicit}");
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), levels in 2usize..4) {
        let b = random_batch(&RandomBatchSpec { seed, levels, ..Default::default() }).unwrap();
        let cfg = LossConfig::default();
        for kind in LossKind::ALL {
            prop_assert!(loss_value(&b, &cfg, kind).unwrap() >= 0.0);
        }
    }

    #[test]
    fn permutation_leaves_values_unchanged(seed in any::<u64>(), shift in 1usize..8) {
        let b = random_batch(&RandomBatchSpec { seed, levels: 3, ..Default::default() }).unwrap();
        let order: Vec<usize> = (0..b.len()).map(|i| (i + shift) % b.len()).rev().collect();
        let p = permuted(&b, &order);
        let cfg = LossConfig::default();
        for kind in LossKind::ALL {
            let (a, c) = (loss_value(&b, &cfg, kind).unwrap(), loss_value(&p, &cfg, kind).unwrap());
            prop_assert!(close(a, c, 1e-12), "{kind}: {a} vs {c}");
        }
    }

    #[test]
    fn mgll_is_linear_in_its_terms(seed in any::<u64>(), a1 in 0.0f64..2.0, a2 in 0.0f64..2.0, a3 in 0.0f64..2.0) {
        let b = random_batch(&RandomBatchSpec { seed, levels: 2, ..Default::default() }).unwrap();
        let cfg = LossConfig::default().with_alphas(a1, a2, a3);
        let parts = [LossKind::SoftClip, LossKind::Pointwise, LossKind::SmoothKl]
            .map(|k| loss_value(&b, &cfg, k).unwrap());
        let expected = a1 * parts[0] + a2 * parts[1] + a3 * parts[2];
        let v = mgll_loss(&b, &cfg).unwrap().value;
        prop_assert!(close(v, expected, 1e-12 * expected.max(1.0)));
    }
}

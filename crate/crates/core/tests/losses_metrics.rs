use proptest::prelude::*;
use rtnag::metrics::{argmax, mape, mauc, precision_recall_f1, r2};
use rtnag::objectives::{
    cross_entropy, focal_loss, focal_on_tape, masked_mse, total_loss, AuxItem, LossConfig, LossItem,
};
use rtnag::{Tape, Tensor};

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    })
}

/// Pairwise one-vs-rest AUC, averaged over classes that have both
/// positives and negatives.
fn pairwise_mauc(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    let classes = scores[0].len();
    let mut aucs = Vec::new();
    for c in 0..classes {
        let mut total = 0.0;
        let mut pairs = 0usize;
        for (si, &li) in scores.iter().zip(labels) {
            if li != c {
                continue;
            }
            for (sj, &lj) in scores.iter().zip(labels) {
                if lj == c {
                    continue;
                }
                pairs += 1;
                total += match si[c].partial_cmp(&sj[c]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
        if pairs > 0 {
            aucs.push(total / pairs as f64);
        }
    }
    aucs.iter().sum::<f64>() / aucs.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn focal_without_focusing_is_cross_entropy(p in simplex(3), label in 0usize..3) {
        let cfg = LossConfig { gamma: 0.0, ..LossConfig::new(3) };
        let f = focal_loss(&p, label, &cfg).unwrap();
        prop_assert!((f - cross_entropy(&p, label).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn focal_never_exceeds_weighted_ce(p in simplex(4), label in 0usize..4, gamma in 0.0f64..5.0) {
        let cfg = LossConfig { gamma, ..LossConfig::new(4) };
        let f = focal_loss(&p, label, &cfg).unwrap();
        prop_assert!(f >= 0.0 && f <= cross_entropy(&p, label).unwrap() + 1e-15);
    }

    #[test]
    fn focal_on_tape_matches_values(p in simplex(3), label in 0usize..3, gamma in 0.0f64..4.0, alpha in 0.1f64..3.0) {
        let mut alphas = vec![1.0; 3];
        alphas[label] = alpha;
        let cfg = LossConfig { alpha: alphas, gamma, ..LossConfig::new(3) };
        let mut tape = Tape::new();
        let probs = tape.constant(Tensor::new(vec![1, 3], p.clone()).unwrap());
        let v = focal_on_tape(&mut tape, probs, label, alpha, gamma).unwrap();
        prop_assert!((tape.scalar_value(v) - focal_loss(&p, label, &cfg).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn masked_entries_do_not_matter(
        pred in prop::collection::vec(0.0f64..1.0, 8),
        target in prop::collection::vec(0.0f64..1.0, 8),
        mask in prop::collection::vec(any::<bool>(), 8),
        noise in prop::collection::vec(-50.0f64..50.0, 16),
    ) {
        prop_assume!(mask.iter().any(|&m| m));
        let base = masked_mse(&Tensor::column(pred.clone()), &Tensor::column(target.clone()), &mask).unwrap();
        let (mut p2, mut t2) = (pred, target);
        for i in (0..8).filter(|&i| !mask[i]) {
            p2[i] = noise[i];
            t2[i] = noise[8 + i];
        }
        let again = masked_mse(&Tensor::column(p2), &Tensor::column(t2), &mask).unwrap();
        prop_assert_eq!(base, again);
    }

    #[test]
    fn mape_and_r2_ignore_masked_cells(
        pred in prop::collection::vec(0.1f64..1.0, 6),
        target in prop::collection::vec(0.1f64..1.0, 6),
        junk in prop::collection::vec(-9.0f64..9.0, 6),
    ) {
        let mask = [true, true, false, true, false, true];
        let (mut p2, mut t2) = (pred.clone(), target.clone());
        for i in [2, 4] {
            p2[i] = junk[i];
            t2[i] = junk[i] + 1.0;
        }
        prop_assert_eq!(mape(&pred, &target, &mask).unwrap(), mape(&p2, &t2, &mask).unwrap());
        let a = r2(&pred, &target, &mask);
        let b = r2(&p2, &t2, &mask);
        prop_assert_eq!(a.ok(), b.ok());
    }
}

#[test]
fn mauc_equals_pairwise_count_with_ties() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let n = rng.gen_range(5..80);
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| f64::from(rng.gen_range(0..6)) / 5.0).collect())
            .collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        labels[0] = 0;
        labels[1] = 2;
        assert_eq!(mauc(&scores, &labels).unwrap(), pairwise_mauc(&scores, &labels));
    }
}

#[test]
fn mauc_reference_values() {
    let perfect = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.3, 0.7], vec![0.1, 0.9]];
    assert_eq!(mauc(&perfect, &[0, 0, 1, 1]).unwrap(), 1.0);
    let flat = vec![vec![0.5, 0.5]; 4];
    assert_eq!(mauc(&flat, &[0, 1, 0, 1]).unwrap(), 0.5);
    assert!(mauc(&flat, &[1, 1, 1, 1]).is_err());
}

#[test]
fn precision_recall_by_hand() {
    // balanced labels, everything predicted as class 0
    let labels = [0, 0, 1, 1, 2, 2];
    let (p, r, f) = precision_recall_f1(&[0; 6], &labels, 3).unwrap();
    assert!((p - 1.0 / 9.0).abs() < 1e-15);
    assert!((r - 1.0 / 3.0).abs() < 1e-15);
    // class 0: P 1/3, R 1, F 1/2; other classes 0
    assert!((f - 1.0 / 6.0).abs() < 1e-15);
    let (p, r, f) = precision_recall_f1(&labels, &labels, 3).unwrap();
    assert_eq!((p, r, f), (1.0, 1.0, 1.0));
}

#[test]
fn regression_metrics_by_hand() {
    let mask = [true; 3];
    assert!((mape(&[1.1, 1.8, 3.0], &[1.0, 2.0, 3.0], &mask).unwrap() - 0.2 / 3.0).abs() < 1e-15);
    assert_eq!(r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &mask).unwrap(), 1.0);
    // predicting the mean scores zero
    assert_eq!(r2(&[2.0; 3], &[1.0, 2.0, 3.0], &mask).unwrap(), 0.0);
    assert!(r2(&[1.0; 3], &[2.0; 3], &mask).is_err());
    assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
}

#[test]
fn total_loss_sums_normalized_terms() {
    let cfg = LossConfig {
        gamma: 0.0,
        lambda_reg: 2.0,
        lambda_ce: 0.5,
        ..LossConfig::new(2)
    };
    let items = [
        LossItem {
            probs: vec![0.25, 0.75],
            label: Some(1),
            pred_scores: vec![0.5, 0.2],
            target_scores: vec![0.3, 0.9],
            score_mask: vec![true, false],
        },
        LossItem {
            probs: vec![0.5, 0.5],
            label: None,
            pred_scores: vec![0.1, 0.1],
            target_scores: vec![0.2, 0.4],
            score_mask: vec![true, true],
        },
    ];
    let aux = [AuxItem {
        probs: vec![0.8, 0.2],
        label: 0,
    }];
    let got = total_loss(&items, &aux, &cfg).unwrap();
    let focal = -(0.75f64).ln();
    let sq = (0.04 + 0.01 + 0.09) / 3.0;
    let ce = -(0.8f64).ln();
    assert!((got - (focal + 2.0 * sq + 0.5 * ce)).abs() < 1e-14, "{got}");
}

use layerinfo::metrics::{auroc, ece, overhead_ratio, rejection_auroc, OverheadCounter, ScoredSet};
use proptest::prelude::*;

/// Quadratic pairwise AUROC, ties counted as one half.
fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Scores on a coarse grid so ties are common; both classes present.
fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=100)
        .prop_flat_map(|n| (prop::collection::vec(-20i32..20, n), prop::collection::vec(any::<bool>(), n)))
        .prop_map(|(grid, mut labels)| {
            labels[0] = true;
            labels[1] = false;
            (grid.into_iter().map(|g| g as f64 / 4.0).collect(), labels)
        })
}

fn set(scores: &[f64], labels: &[bool]) -> ScoredSet {
    ScoredSet::from_scores("m", scores, labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auroc_matches_pairwise_oracle((scores, labels) in instance()) {
        let fast = auroc(&set(&scores, &labels)).unwrap();
        prop_assert!((fast - pairwise_auroc(&scores, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn auroc_label_complement((scores, labels) in instance()) {
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let a = auroc(&set(&scores, &labels)).unwrap();
        let b = auroc(&set(&scores, &flipped)).unwrap();
        prop_assert!((a + b - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn auroc_monotone_transform((scores, labels) in instance()) {
        let a = auroc(&set(&scores, &labels)).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s - 7.0).collect();
        let cubic: Vec<f64> = scores.iter().map(|s| s * s * s + s).collect();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        for t in [affine, cubic, exp] {
            prop_assert_eq!(auroc(&set(&t, &labels)).unwrap(), a);
        }
    }

    #[test]
    fn zero_rejection_is_plain_auroc((scores, labels) in instance()) {
        let s = set(&scores, &labels);
        prop_assert_eq!(rejection_auroc(&s, 0.0).unwrap(), auroc(&s).unwrap());
    }

    #[test]
    fn ece_is_permutation_invariant_and_bounded(
        rows in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..80),
        bins in 1usize..20,
        seed in any::<u64>(),
    ) {
        let base = ece(&rows, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        let mut shuffled = rows.clone();
        // deterministic Fisher-Yates from the seed
        let mut state = seed | 1;
        for i in (1..shuffled.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            shuffled.swap(i, (state % (i as u64 + 1)) as usize);
        }
        prop_assert!((ece(&shuffled, bins).unwrap() - base).abs() <= 1e-12);
    }
}

#[test]
fn ece_two_bin_hand_case() {
    let rows = [(0.2, false), (0.3, true), (0.8, true), (0.9, true)];
    assert!((ece(&rows, 2).unwrap() - 0.2).abs() <= 1e-12);
}

#[test]
fn ece_perfect_predictor_is_zero() {
    let rows = [(0.0, false), (1.0, true), (0.0, false), (1.0, true)];
    assert_eq!(ece(&rows, 10).unwrap(), 0.0);
}

#[test]
fn two_pass_overhead_from_corpus_statistics() {
    // the null pass re-reads only the question
    let ratio = |context: f64, question: f64| {
        let single =
            OverheadCounter { method: "ctx".into(), forward_passes: 1, tokens_processed: (context + question) as u64 };
        let li = OverheadCounter {
            method: "li".into(),
            forward_passes: 2,
            tokens_processed: (context + 2.0 * question) as u64,
        };
        overhead_ratio(&li, &single).unwrap()
    };
    // scaled by 10 so the means are whole tokens
    assert!((ratio(2710.0, 55.0) - 1.02).abs() < 0.005);
    assert!((ratio(4010.0, 65.0) - 1.016).abs() < 0.001);
    assert!((ratio(1310.0, 244.0) - 1.16).abs() < 0.005);
    // equal context and question: (C + 2Q) / (C + Q)
    assert_eq!(ratio(100.0, 100.0), 1.5);
}

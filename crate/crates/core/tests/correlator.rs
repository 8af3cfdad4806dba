use proptest::prelude::*;

use noctunnel::correlator::{similarity, CorrelatorModel, MetricsReport};
use noctunnel::probe::IfdArray;

fn arr(v: Vec<u64>) -> IfdArray {
    IfdArray {
        valid_len: v.len(),
        values: v,
    }
}

fn paired() -> impl Strategy<Value = (Vec<u64>, Vec<u64>)> {
    (2usize..80).prop_flat_map(|n| (prop::collection::vec(0u64..500, n), prop::collection::vec(0u64..500, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn score_is_bounded_and_symmetric((a, b) in paired()) {
        let s = similarity(&arr(a.clone()), &arr(b.clone()));
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(s, similarity(&arr(b), &arr(a)));
    }

    #[test]
    fn joint_permutation_keeps_score((a, b) in paired(), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut idx: Vec<usize> = (0..a.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let pa: Vec<u64> = idx.iter().map(|&i| a[i]).collect();
        let pb: Vec<u64> = idx.iter().map(|&i| b[i]).collect();
        let (s, t) = (similarity(&arr(a), &arr(b)), similarity(&arr(pa), &arr(pb)));
        prop_assert!((s - t).abs() < 1e-9, "{} vs {}", s, t);
    }

    #[test]
    fn affine_rescaling_keeps_score((a, b) in paired(), k in 1u64..20, c in 0u64..1000) {
        let scaled: Vec<u64> = a.iter().map(|&x| x * k + c).collect();
        let (s, t) = (similarity(&arr(a), &arr(b.clone())), similarity(&arr(scaled), &arr(b)));
        prop_assert!((s - t).abs() < 1e-9, "{} vs {}", s, t);
    }

    #[test]
    fn classification_is_monotone(t in -1.0f64..=1.0, x in -1.0f64..=1.0, y in -1.0f64..=1.0) {
        let m = CorrelatorModel { threshold: t, trained: true };
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        prop_assert!(m.classify(lo) <= m.classify(hi));
    }

    #[test]
    fn f1_identity(tp in 0u64..10_000, tn in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000) {
        let m = MetricsReport::from_counts(tp, tn, fp, fn_);
        let direct = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        prop_assert!((m.f1 - direct).abs() < 1e-12);
        prop_assert_eq!(m.total(), tp + tn + fp + fn_);
    }
}

#[test]
fn identical_timing_scores_one() {
    let a = arr(vec![1, 1, 1, 1, 16, 1, 1, 1, 1, 40]);
    assert!((similarity(&a, &a.clone()) - 1.0).abs() < 1e-12);
}

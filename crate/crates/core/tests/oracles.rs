mod common;

use candle_core::DType;
use common::*;
use mmr_core::exec::Execution;
use mmr_core::scoring::{anomaly_map, mmr_loss};
use proptest::prelude::*;

#[test]
fn anomaly_map_is_schedule_independent() {
    let (s, t) = random_pair(7);
    let (zs, zt) = (features(&s, DType::F32), features(&t, DType::F32));
    let a = anomaly_map(&zs, &zt, 32, 32, Execution::Parallel).unwrap();
    let b = anomaly_map(&zs, &zt, 32, 32, Execution::Sequential).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_stays_within_bounds(seed in any::<u64>(), flip in any::<bool>(), zero in any::<bool>()) {
        let (s, mut t) = random_pair(seed);
        if flip {
            for (ts, ss) in t.iter_mut().zip(&s) {
                *ts = ss.iter().map(|b| b.iter().map(|c| c.iter().map(|r| r.iter().map(|v| -v).collect()).collect()).collect()).collect();
            }
        }
        if zero {
            for v in t[0].iter_mut().flatten().flatten().flatten() {
                *v = 0.0;
            }
        }
        let l = mmr_loss(&features(&s, DType::F32), &features(&t, DType::F32)).unwrap().to_scalar::<f32>().unwrap();
        prop_assert!(l.is_finite());
        prop_assert!(l >= -1e-6 && l <= 2.0 * s.len() as f32 + 1e-5, "loss {l} for {} scales", s.len());
    }
}

#[test]
fn region_labels_match_union_find() {
    for seed in 0..50 {
        let mut r = rng(9000 + seed);
        let mask = random_blob_mask(&mut r, 16, 16);
        let (labels, count) = mmr_core::metrics::label_components(&mask);
        let reference = union_find_labels(&mask);
        let n_ref = reference.iter().flatten().max().map_or(0, |m| m + 1);
        assert_eq!(count, n_ref);
        // same partition up to renaming
        for i in 0..256 {
            for j in 0..256 {
                if let (Some(a), Some(b)) = (reference[i], reference[j]) {
                    assert_eq!(a == b, labels[i] == labels[j]);
                }
            }
        }
    }
}

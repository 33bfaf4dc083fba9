//! Brute-force oracles and invariants for the evaluation metrics.

mod common;

use common::oracles::{auc_oracle, labels, rank1_oracle, roc_oracle, tar_oracle, verification_oracle};
use fan_core::eval::{rank1_identification, tar_far_auc, verification_from_distances, Roc};
use proptest::prelude::*;

const CASES: u32 = 256;

/// Distances on a grid of `levels` values, coarse enough that ties occur.
fn distances(max_folds: usize, levels: u32) -> impl Strategy<Value = (Vec<f64>, usize)> {
    (2usize..=max_folds, 2usize..6).prop_flat_map(move |(folds, per)| {
        (prop::collection::vec((0..levels).prop_map(|v| v as f64 * 0.125), folds * per), Just(folds))
    })
}

fn feature() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-3i32..=3).prop_map(f64::from), 3).prop_filter("nonzero", |v| v.iter().any(|x| *x != 0.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn verification_matches_threshold_oracle((d, folds) in distances(10, 12)) {
        let same = labels(d.len());
        let v = verification_from_distances(&d, &same, folds).unwrap();
        let (accs, ts) = verification_oracle(&d, &same, folds);
        prop_assert_eq!(&v.fold_accuracies, &accs);
        prop_assert_eq!(&v.thresholds, &ts);
        prop_assert_eq!(v.accuracy, accs.iter().sum::<f64>() / folds as f64);
    }

    #[test]
    fn verification_invariant_under_affine_maps((d, folds) in distances(6, 12), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        // dyadic scales and integer shifts keep the mapped grid exact
        let same = labels(d.len());
        let base = verification_from_distances(&d, &same, folds).unwrap().accuracy;
        let scale = (a.log2().round()).exp2();
        let mapped: Vec<f64> = d.iter().map(|x| x * scale + b.round()).collect();
        prop_assert_eq!(verification_from_distances(&mapped, &same, folds).unwrap().accuracy, base);
    }

    #[test]
    fn verification_invariant_under_monotone_maps_on_shared_values((d, folds) in distances(4, 3)) {
        // held-out values that also occur in training folds are classified
        // by order alone, so any strictly increasing map preserves accuracy
        let same = labels(d.len());
        let n = d.len();
        let shared = (0..folds).all(|k| {
            let (lo, hi) = (k * n / folds, (k + 1) * n / folds);
            (lo..hi).all(|i| (0..n).any(|j| (j < lo || j >= hi) && d[j] == d[i]))
        });
        prop_assume!(shared);
        let base = verification_from_distances(&d, &same, folds).unwrap().accuracy;
        let mapped: Vec<f64> = d.iter().map(|x| (3.0 * x).exp() + x.powi(3)).collect();
        prop_assert_eq!(verification_from_distances(&mapped, &same, folds).unwrap().accuracy, base);
    }

    #[test]
    fn roc_matches_enumeration(
        same in prop::collection::vec((0u32..10).prop_map(|v| v as f64 / 10.0), 1..12),
        diff in prop::collection::vec((0u32..10).prop_map(|v| v as f64 / 10.0), 1..12),
        far in 0.0f64..=1.0,
    ) {
        let roc = Roc::new(&same, &diff).unwrap();
        let pts = roc_oracle(&same, &diff);
        prop_assert_eq!(&roc.points, &pts);
        prop_assert!((roc.auc() - auc_oracle(&same, &diff)).abs() < 1e-12);
        prop_assert_eq!(roc.tar_at(far).unwrap(), tar_oracle(&pts, far));
        for p in &pts {
            prop_assert_eq!(roc.tar_at(p.0).unwrap(), tar_oracle(&pts, p.0));
        }
    }

    #[test]
    fn tar_monotone_in_far_and_auc_bounded(
        same in prop::collection::vec(-1.0f64..1.0, 1..30),
        diff in prop::collection::vec(-1.0f64..1.0, 1..30),
        mut fars in prop::collection::vec(0.0f64..=1.0, 2..8),
    ) {
        fars.sort_by(f64::total_cmp);
        let r = tar_far_auc(&same, &diff, &fars).unwrap();
        for w in r.tar_at_far.windows(2) {
            prop_assert!(w[0].1 <= w[1].1 + 1e-15);
        }
        prop_assert!((0.0..=1.0).contains(&r.auc));
        for (_, t) in &r.tar_at_far {
            prop_assert!((0.0..=1.0).contains(t));
        }
    }

    #[test]
    fn rank1_matches_distance_matrix(
        gallery in prop::collection::vec(feature(), 1..6),
        probes in prop::collection::vec((feature(), 0usize..6, 8usize..=32), 1..6),
    ) {
        let gids: Vec<usize> = (0..gallery.len()).collect();
        let pf: Vec<Vec<f64>> = probes.iter().map(|p| p.0.clone()).collect();
        let pids: Vec<usize> = probes.iter().map(|p| p.1).collect();
        let res: Vec<usize> = probes.iter().map(|p| p.2).collect();
        let r = rank1_identification(&gallery, &gids, &pf, &pids, &res).unwrap();
        let m = rank1_oracle(&gallery, &pf);
        prop_assert_eq!(&r.matches, &m);
        let hits = m.iter().zip(&pids).filter(|(g, p)| gids[**g] == **p).count();
        prop_assert_eq!(r.overall, hits as f64 / pf.len() as f64);
        let total: usize = r.buckets.iter().map(|b| b.total).sum();
        prop_assert_eq!(total, pf.len());
    }

    #[test]
    fn rank1_invariant_under_uniform_scaling(
        gallery in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..6),
        probes in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..6),
        k in -6i32..6,
    ) {
        prop_assume!(gallery.iter().chain(&probes).all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6));
        let gids: Vec<usize> = (0..gallery.len()).collect();
        let pids = vec![0; probes.len()];
        let res = vec![16; probes.len()];
        let s = 2f64.powi(k);
        let scale = |v: &Vec<Vec<f64>>| v.iter().map(|f| f.iter().map(|x| x * s).collect()).collect::<Vec<Vec<f64>>>();
        let a = rank1_identification(&gallery, &gids, &probes, &pids, &res).unwrap();
        let b = rank1_identification(&scale(&gallery), &gids, &scale(&probes), &pids, &res).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn hand_built_six_pair_case() {
    // folds of two: (0.1 same, 0.5 diff), (0.3 same, 0.2 diff), (0.4 same, 0.9 diff)
    let d = [0.1, 0.5, 0.3, 0.2, 0.4, 0.9];
    let same = [true, false, true, false, true, false];
    let v = verification_from_distances(&d, &same, 3).unwrap();
    // fold 0 trains on {0.2 d, 0.3 s, 0.4 s, 0.9 d}: cut between 0.4 and 0.9 gets 3 of 4
    // fold 1 trains on {0.1 s, 0.4 s, 0.5 d, 0.9 d}: cut between 0.4 and 0.5 gets 4 of 4
    // fold 2 trains on {0.1 s, 0.2 d, 0.3 s, 0.5 d}: two cuts tie at 3 of 4, the smaller wins
    assert_eq!(v.thresholds, vec![0.5 * (0.4 + 0.9), 0.5 * (0.4 + 0.5), 0.5 * (0.1 + 0.2)]);
    // each fold misclassifies exactly one held-out pair
    assert_eq!(v.fold_accuracies, vec![0.5, 0.5, 0.5]);
    assert_eq!(v.fold_accuracies, verification_oracle(&d, &same, 3).0);
}

#[test]
fn ten_score_roc_case() {
    let same = [0.9, 0.8, 0.7, 0.6, 0.4];
    let diff = [0.75, 0.5, 0.3, 0.2, 0.1];
    let r = tar_far_auc(&same, &diff, &[0.2, 0.3]).unwrap();
    // genuine scores beat 5, 5, 4, 4 and 3 impostors
    assert!((r.auc - 21.0 / 25.0).abs() < 1e-12);
    // FAR 0.2 is a vertical run from TAR 0.4 to 0.8; FAR 0.3 lies on a flat segment
    assert_eq!(r.tar_at_far, vec![(0.2, 0.8), (0.3, 0.8)]);
    let roc = Roc::new(&same, &diff).unwrap();
    assert_eq!(roc.tar_at(0.5).unwrap(), 1.0);
    assert!((roc.tar_at(0.1).unwrap() - 0.4).abs() < 1e-15);
}

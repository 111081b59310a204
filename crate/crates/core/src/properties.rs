//! Property tests for the invariants of the data model, the smoother, the
//! metrics and the schedule.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::obsdata::{
    inject_outliers, parse_dense_csv, parse_long_csv, sample_mask, write_dense_blocks,
    write_long_csv, DayStream, Dims, Entry, ObservationSet, OutlierInjectionSpec, SparseMap,
};
use crate::oracle::{dense_v_oracle, principal_angles};
use crate::pipeline::{eta_for, mre, rmse, EtaSchedule};
use crate::robust::support_f1;
use crate::smoother::{smooth, BlockTridiagonalSystem};

/// SPD by block diagonal dominance: every diagonal block is `AAᵀ` plus a
/// shift larger than the norms of its off-diagonal neighbours.
fn spd_system(r: usize, t: usize, seed: u64) -> BlockTridiagonalSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_mat =
        |rows, cols| DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    let superdiag: Vec<DMatrix<f64>> = (0..t.saturating_sub(1)).map(|_| rand_mat(r, r)).collect();
    let mut diag = Vec::new();
    for k in 0..t {
        let a = rand_mat(r, r);
        let left = if k > 0 { superdiag[k - 1].norm() } else { 0.0 };
        let right = superdiag.get(k).map_or(0.0, |s| s.norm());
        diag.push(&a * a.transpose() + DMatrix::identity(r, r) * (left + right + 0.1));
    }
    let rhs = (0..t)
        .map(|_| DVector::from_iterator(r, rand_mat(r, 1).iter().copied()))
        .collect();
    BlockTridiagonalSystem::new(diag, superdiag, rhs).unwrap()
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn cells(n: usize, t: usize) -> impl Strategy<Value = Vec<(usize, usize, f64)>> {
    proptest::collection::btree_map(
        (0..n, 0..t),
        prop_oneof![
            any::<f64>().prop_filter("finite", |v| v.is_finite()),
            -1e3..1e3f64
        ],
        1..(n * t).min(40),
    )
    .prop_map(|m| m.into_iter().map(|((i, j), v)| (i, j, v)).collect())
}

fn obs_from(n: usize, t: usize, day: usize, cells: &[(usize, usize, f64)]) -> ObservationSet {
    let entries = cells
        .iter()
        .map(|&(row, col, value)| Entry { row, col, value })
        .collect();
    ObservationSet::new(n, t, entries, day).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smoother_matches_dense_inverse(r in 1usize..=4, t in 1usize..=12, seed in any::<u64>()) {
        let sys = spd_system(r, t, seed);
        let fast = smooth(&sys).unwrap();
        let slow = dense_v_oracle(&sys).unwrap();
        for k in 0..t {
            let (a, b) = (&fast.means[k], &slow.means[k]);
            prop_assert!((a - b).norm() <= 1e-10 * b.norm().max(1e-300));
            prop_assert!(rel(&fast.cov_diag[k], &slow.cov_diag[k]) <= 1e-10);
            let c = &fast.cov_diag[k];
            prop_assert!((c - c.transpose()).norm() <= 1e-14 * c.norm());
            prop_assert!(c.clone().cholesky().is_some());
        }
        for k in 0..t.saturating_sub(1) {
            prop_assert!(rel(&fast.cov_superdiag[k], &slow.cov_superdiag[k]) <= 1e-10);
        }
    }

    #[test]
    fn long_csv_round_trip_is_bit_exact(
        a in cells(5, 7),
        b in cells(5, 7),
    ) {
        let stream = DayStream::new(vec![obs_from(5, 7, 0, &a), obs_from(5, 7, 3, &b)]).unwrap();
        let mut buf = Vec::new();
        write_long_csv(&stream, &mut buf).unwrap();
        let dims = Dims { n: Some(5), t: Some(7) };
        let back = parse_long_csv(buf.as_slice(), dims).unwrap();
        prop_assert_eq!(back.len(), 2);
        for (x, y) in back.days().iter().zip(stream.days()) {
            prop_assert_eq!(x.day_index(), y.day_index());
            prop_assert_eq!(x.len(), y.len());
            for (e, f) in x.entries().iter().zip(y.entries()) {
                prop_assert_eq!((e.row, e.col), (f.row, f.col));
                prop_assert_eq!(e.value.to_bits(), f.value.to_bits());
            }
        }
    }

    #[test]
    fn dense_csv_round_trip(a in cells(4, 6)) {
        let obs = obs_from(4, 6, 0, &a);
        let mut buf = Vec::new();
        write_dense_blocks(&[obs.to_dense()], "NaN", &mut buf).unwrap();
        let back = parse_dense_csv(buf.as_slice(), "NaN").unwrap();
        prop_assert_eq!(&back.days()[0], &obs);
    }

    #[test]
    fn metrics_ignore_holdout_order(
        seed in any::<u64>(),
        k in 1usize..30,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = DMatrix::from_fn(6, 5, |_, _| rng.random_range(0.5..2.0));
        let est = DMatrix::from_fn(6, 5, |_, _| rng.random_range(-2.0..2.0));
        let mut holdout: Vec<(usize, usize)> = (0..30).map(|c| (c / 5, c % 5)).take(k).collect();
        let (m0, r0) = (mre(&truth, &est, &holdout).unwrap(), rmse(&truth, &est, &holdout).unwrap());
        for i in (1..holdout.len()).rev() {
            let j = rng.random_range(0..=i);
            holdout.swap(i, j);
        }
        let (m1, r1) = (mre(&truth, &est, &holdout).unwrap(), rmse(&truth, &est, &holdout).unwrap());
        prop_assert!((m0 - m1).abs() <= 1e-12 * m0.max(1e-300));
        prop_assert!((r0 - r1).abs() <= 1e-12 * r0.max(1e-300));
        prop_assert!(m0 >= 0.0 && r0 >= 0.0);
    }

    #[test]
    fn mask_is_a_pure_function_of_its_inputs(
        n in 1usize..12,
        t in 1usize..12,
        p in 0.05f64..=1.0,
        seed in any::<u64>(),
    ) {
        let full = DMatrix::from_fn(n, t, |i, j| (i * t + j) as f64);
        let count = (p * (n * t) as f64).round() as usize;
        prop_assume!(count > 0);
        let a = sample_mask(&full, p, seed).unwrap();
        prop_assert_eq!(a.len(), count);
        prop_assert!(a.entries().iter().all(|e| e.value == full[(e.row, e.col)]));
        prop_assert_eq!(sample_mask(&full, p, seed).unwrap(), a);
    }

    #[test]
    fn injection_keeps_cells_and_is_additive(
        a in cells(6, 6),
        fraction in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let clean: Vec<_> = a.iter().map(|&(i, j, v)| (i, j, v.clamp(-1e3, 1e3))).collect();
        let obs = obs_from(6, 6, 0, &clean);
        let spec = OutlierInjectionSpec::new(fraction, 100.0, seed).unwrap();
        let (bad, truth) = inject_outliers(&obs, &spec).unwrap();
        prop_assert_eq!(truth.len(), (fraction * obs.len() as f64).round() as usize);
        for (x, y) in bad.entries().iter().zip(obs.entries()) {
            prop_assert_eq!((x.row, x.col), (y.row, y.col));
            let e = truth.get(&(x.row, x.col)).copied().unwrap_or(0.0);
            prop_assert!(e.abs() <= 100.0);
            prop_assert!((x.value - e - y.value).abs() <= 1e-12 * (y.value.abs() + 100.0));
        }
    }

    #[test]
    fn fitted_schedules_are_positive(p in 1e-6f64..=1.0) {
        prop_assert!(eta_for(p, &EtaSchedule::TRAFFIC).unwrap() > 0.0);
        prop_assert!(eta_for(p, &EtaSchedule::AIR).unwrap() > 0.0);
    }

    #[test]
    fn angles_depend_only_on_the_span(seed in any::<u64>(), k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(8, k, |_, _| rng.random_range(-1.0..1.0));
        // unit lower-triangular plus a scaled diagonal is always invertible
        let m = DMatrix::from_fn(k, k, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => rng.random_range(-1.0..1.0),
            std::cmp::Ordering::Equal => 1.0 + rng.random_range(0.0..1.0),
            std::cmp::Ordering::Less => 0.0,
        });
        let angles = principal_angles(&a, &(&a * m)).unwrap();
        prop_assert_eq!(angles.len(), k);
        prop_assert!(angles.iter().all(|x| x.abs() <= 1e-6));
    }

    #[test]
    fn support_f1_is_symmetric_and_bounded(
        x in proptest::collection::btree_set((0usize..5, 0usize..5), 0..10),
        y in proptest::collection::btree_set((0usize..5, 0usize..5), 0..10),
    ) {
        let to_map = |s: &std::collections::BTreeSet<(usize, usize)>| -> SparseMap {
            s.iter().map(|&c| (c, 1.0)).collect()
        };
        let (a, b) = (to_map(&x), to_map(&y));
        let f = support_f1(&a, &b);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f, support_f1(&b, &a));
        prop_assert_eq!(support_f1(&a, &a), 1.0);
    }
}

use proptest::prelude::*;
use stgcl_core::augment::{
    dct, edge_mask, idct, input_mask, input_smooth, temporal_shift, MASK_VALUE,
};
use stgcl_core::contrast::{graph_infonce, temporal_filter, FilterSpec};
use stgcl_core::data::split;
use stgcl_core::graph::normalize_adjacency;
use stgcl_core::rng::{stream, Purpose};
use stgcl_core::train::{metrics, welch_t_test};
use stgcl_core::{Mode, Tape, Tensor};

fn vec_in(
    len: impl Into<prop::collection::SizeRange>,
    lo: f64,
    hi: f64,
) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

/// Rows bounded away from zero so cosine similarity is defined.
fn rows(m: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
    vec_in(m * d, 0.1, 1.0).prop_flat_map(move |mags| {
        prop::collection::vec(any::<bool>(), m * d).prop_map(move |signs| {
            mags.iter()
                .zip(&signs)
                .map(|(v, s)| if *s { *v } else { -v })
                .collect()
        })
    })
}

fn graph_loss(z1: &[f64], z2: &[f64], m: usize, d: usize, chi: &[Vec<usize>]) -> f64 {
    let mut tape = Tape::new(Mode::Eval, 0);
    let a = tape
        .constant(Tensor::new([m, d], z1.to_vec()).unwrap())
        .unwrap();
    let b = tape
        .constant(Tensor::new([m, d], z2.to_vec()).unwrap())
        .unwrap();
    let loss = graph_infonce(&mut tape, a, b, chi, 0.2, 0.0).unwrap();
    tape.value(loss).item().unwrap()
}

fn all_others(m: usize) -> Vec<Vec<usize>> {
    (0..m)
        .map(|i| (0..m).filter(|&j| j != i).collect())
        .collect()
}

fn spec(r_f: f64) -> FilterSpec {
    FilterSpec {
        r_f,
        spatial: false,
        steps_per_day: 288,
        interval_minutes: 5,
    }
}

proptest! {
    #[test]
    fn dct_roundtrip(x in vec_in(1..64, -100.0, 100.0)) {
        let back = idct(&dct(&x));
        for (a, b) in back.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn dct_preserves_energy(x in vec_in(1..64, -10.0, 10.0)) {
        let e = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        prop_assert!((e(&dct(&x)) - e(&x)).abs() < 1e-9 * (1.0 + e(&x)));
    }

    #[test]
    fn graph_loss_ignores_row_scale(
        (z1, z2, scales) in (rows(5, 3), rows(5, 3), vec_in(5, 0.1, 10.0))
    ) {
        let scaled: Vec<f64> = z1.iter().enumerate().map(|(k, v)| v * scales[k / 3]).collect();
        let chi = all_others(5);
        prop_assert!((graph_loss(&z1, &z2, 5, 3, &chi) - graph_loss(&scaled, &z2, 5, 3, &chi)).abs() < 1e-10);
    }

    #[test]
    fn graph_loss_is_permutation_invariant(
        (z1, z2, perm) in (rows(6, 4), rows(6, 4), Just((0..6).collect::<Vec<usize>>()).prop_shuffle())
    ) {
        let take = |z: &[f64]| -> Vec<f64> { perm.iter().flat_map(|&p| z[p * 4..p * 4 + 4].to_vec()).collect() };
        let chi = all_others(6);
        let a = graph_loss(&z1, &z2, 6, 4, &chi);
        let b = graph_loss(&take(&z1), &take(&z2), 6, 4, &chi);
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn temporal_sets_shrink_with_threshold(
        slots in prop::collection::vec(0usize..288, 2..40),
        lo in 0.0f64..700.0,
        extra in 0.0f64..700.0,
    ) {
        let hi = (lo + extra).min(715.0);
        let small = temporal_filter(&slots, &spec(hi)).unwrap();
        let large = temporal_filter(&slots, &spec(lo)).unwrap();
        for (i, (s, l)) in small.iter().zip(&large).enumerate() {
            prop_assert!(!l.contains(&i));
            prop_assert!(s.iter().all(|j| l.contains(j)));
        }
    }

    #[test]
    fn temporal_sets_are_symmetric(slots in prop::collection::vec(0usize..288, 2..40), r_f in 0.0f64..700.0) {
        let sets = temporal_filter(&slots, &spec(r_f)).unwrap();
        for (i, s) in sets.iter().enumerate() {
            for &j in s {
                prop_assert!(sets[j].contains(&i));
            }
        }
    }

    #[test]
    fn input_mask_keeps_or_masks(x in vec_in(1..200, 0.0, 1.0), ratio in 0.0f64..1.0, seed: u64) {
        let out = input_mask(&x, ratio, &mut stream(seed, Purpose::Test, 0, 0));
        for (o, v) in out.iter().zip(&x) {
            prop_assert!(o == v || *o == MASK_VALUE);
        }
    }

    #[test]
    fn edge_mask_only_drops(w in vec_in(16, 0.0, 1.0), ratio in 0.0f64..1.0, seed: u64) {
        let a = Tensor::new([4, 4], w).unwrap();
        let out = edge_mask(&a, ratio, &mut stream(seed, Purpose::Test, 0, 0));
        for (o, v) in out.data().iter().zip(a.data()) {
            prop_assert!(o == v || *o == 0.0);
        }
    }

    #[test]
    fn temporal_shift_stays_between(
        (x, y) in (1usize..50).prop_flat_map(|n| (vec_in(n, -5.0, 5.0), vec_in(n, -5.0, 5.0))),
        alpha in 0.0f64..=1.0,
    ) {
        let out = temporal_shift(&x, Some(&y), alpha);
        for ((o, a), b) in out.iter().zip(&x).zip(&y) {
            prop_assert!(*o >= a.min(*b) - 1e-12 && *o <= a.max(*b) + 1e-12);
        }
    }

    #[test]
    fn smoothing_with_all_fixed_is_identity(x in vec_in(24, -3.0, 3.0), ratio in 0.0f64..1.0, seed: u64) {
        let out = input_smooth(&x, 12, 2, 12, 12, ratio, None, &mut stream(seed, Purpose::Test, 0, 0)).unwrap();
        for (o, v) in out.iter().zip(&x) {
            prop_assert!((o - v).abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_rows_sum_to_one(w in vec_in(25, 0.0, 1.0)) {
        let a = normalize_adjacency(&Tensor::new([5, 5], w).unwrap());
        for row in a.data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_partitions_the_series(total in 120usize..50_000) {
        let counts = split(total, [0.6, 0.2, 0.2], 12, 12).unwrap();
        prop_assert_eq!(counts.total(), total);
        let windows = counts.window_counts(12, 12);
        prop_assert_eq!(windows.iter().sum::<usize>(), total - 3 * 23);
    }

    #[test]
    fn split_rejects_short_partitions(total in 0usize..119) {
        prop_assert!(split(total, [0.6, 0.2, 0.2], 12, 12).is_err());
    }

    #[test]
    fn welch_is_antisymmetric(a in vec_in(2..8, 0.0, 10.0), b in vec_in(2..8, 0.0, 10.0)) {
        let ab = welch_t_test(&a, &b).unwrap();
        let ba = welch_t_test(&b, &a).unwrap();
        prop_assert!((ab.t + ba.t).abs() < 1e-9 || (ab.t.is_infinite() && ba.t == -ab.t));
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
    }

    #[test]
    fn mae_never_exceeds_rmse(pred in vec_in(24, 0.0, 100.0), target in vec_in(24, 1.0, 100.0)) {
        let p = Tensor::new([2, 3, 4], pred).unwrap();
        let t = Tensor::new([2, 3, 4], target).unwrap();
        let m = metrics(&p, &t, &[1, 3]).unwrap();
        prop_assert!(m.average.mae <= m.average.rmse + 1e-12);
        for h in &m.horizons {
            prop_assert!(h.metrics.mae <= h.metrics.rmse + 1e-12);
        }
    }
}

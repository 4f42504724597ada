mod common;

use proptest::prelude::*;

use pkef::checkpoint;
use pkef::data::{build_normalized_adjacency, BehaviorDataset};
use pkef::eval::{binary_pearson, hr_ndcg, pearson_case_study, rank_items, user_mean_correlation, RankingResult};
use pkef::math::sparse::{spmm, SparseMatrix};
use pkef::math::DenseMatrix;
use pkef::params::ParamStore;

fn dense(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| DenseMatrix::from_vec(rows, cols, v).unwrap())
}

fn sparse_and_two(n: usize, d: usize) -> impl Strategy<Value = (SparseMatrix, DenseMatrix, DenseMatrix)> {
    (
        prop::collection::vec(prop::option::weighted(0.4, -2.0f64..2.0), n * n),
        dense(n, d),
        dense(n, d),
    )
        .prop_map(move |(cells, x, y)| {
            let trip: Vec<(usize, usize, f64)> = cells
                .iter()
                .enumerate()
                .filter_map(|(i, c)| c.map(|v| (i / n, i % n, v)))
                .collect();
            (SparseMatrix::from_triplets(n, n, &trip).unwrap(), x, y)
        })
}

/// Random multi-behavior dataset whose target behavior leaves at least one
/// item free for every test user.
fn dataset() -> impl Strategy<Value = BehaviorDataset> {
    (2usize..7, 3usize..9, 2usize..4).prop_flat_map(|(users, items, kk)| {
        prop::collection::vec(prop::collection::vec(any::<bool>(), users * items), kk).prop_map(move |grids| {
            let raw: Vec<Vec<(usize, usize)>> = grids
                .iter()
                .map(|g| {
                    g.iter()
                        .enumerate()
                        .filter(|(_, &on)| on)
                        .map(|(i, _)| (i / items, i % items))
                        // the last item stays free so every user can be tested
                        .filter(|&(_, v)| v + 1 < items)
                        .collect()
                })
                .collect();
            let test = (0..users).map(|u| (u, items - 1)).collect();
            let names = (0..kk).map(|k| format!("b{k}")).collect();
            BehaviorDataset::from_pairs(users, items, names, raw, test).unwrap()
        })
    })
}

fn brute_pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spmm_is_linear((a, x, y) in sparse_and_two(5, 3), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let mut mix = x.scale(alpha);
        mix.axpy(beta, &y);
        let lhs = spmm(&a, &mix).unwrap();
        let mut rhs = spmm(&a, &x).unwrap().scale(alpha);
        rhs.axpy(beta, &spmm(&a, &y).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn spmm_matches_dense_product((a, x, _) in sparse_and_two(6, 2)) {
        let got = spmm(&a, &x).unwrap();
        let want = a.to_dense().matmul(&x).unwrap();
        prop_assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn normalized_adjacency_rows_sum_to_one(ds in dataset()) {
        for k in 0..ds.behavior_count() {
            let adj = build_normalized_adjacency(&ds, k);
            for r in 0..ds.node_count() {
                prop_assert!((adj.matrix.row_sum(r) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ranking_ignores_shift_and_positive_scale(
        scores in prop::collection::vec(-50i32..50, 2..30),
        shift in -100i32..100,
        factor in 1u32..8,
        pick in any::<prop::sample::Index>(),
    ) {
        // integer-valued scores keep the transformed comparisons exact
        let base: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
        let moved: Vec<f64> = scores.iter().map(|&s| ((s + shift) * factor as i32) as f64).collect();
        let target = pick.index(base.len());
        prop_assert_eq!(rank_items(&base, &[], target).unwrap().rank, rank_items(&moved, &[], target).unwrap().rank);
    }

    #[test]
    fn excluded_items_never_outrank(
        scores in prop::collection::vec(-1.0f64..1.0, 3..20),
        pick in any::<prop::sample::Index>(),
    ) {
        let target = pick.index(scores.len());
        let exclude: Vec<usize> = (0..scores.len()).filter(|&j| j != target && scores[j] > scores[target]).collect();
        let r = rank_items(&scores, &exclude, target).unwrap();
        // only ties with lower index can still come first
        let ties = (0..target).filter(|&j| scores[j] == scores[target]).count();
        prop_assert_eq!(r.rank, 1 + ties);
        prop_assert_eq!(r.candidates, scores.len() - exclude.len());
    }

    #[test]
    fn hit_ratio_grows_with_the_cutoff(ranks in prop::collection::vec(1usize..40, 1..30), k in 1usize..20) {
        let (hr_small, ndcg_small) = hr_ndcg(&ranks, k).unwrap();
        let (hr_big, ndcg_big) = hr_ndcg(&ranks, k + 5).unwrap();
        prop_assert!(hr_small <= hr_big && ndcg_small <= ndcg_big);
        prop_assert!(ndcg_small <= hr_small && hr_big <= 1.0);
    }

    #[test]
    fn binary_pearson_matches_the_definition(a in prop::collection::vec(any::<bool>(), 2..40), seed in any::<u64>()) {
        let b: Vec<bool> = a.iter().enumerate().map(|(i, &x)| x ^ ((seed >> (i % 64)) & 1 == 1)).collect();
        let fa: Vec<f64> = a.iter().map(|&x| x as u8 as f64).collect();
        let fb: Vec<f64> = b.iter().map(|&x| x as u8 as f64).collect();
        let ca = a.iter().filter(|&&x| x).count();
        let cb = b.iter().filter(|&&x| x).count();
        let both = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        match (binary_pearson(a.len(), ca, cb, both), brute_pearson(&fa, &fb)) {
            (Some(got), Some(want)) => prop_assert!((got - want).abs() < 1e-10),
            (None, None) => {}
            other => prop_assert!(false, "definedness differs: {:?}", other),
        }
    }

    #[test]
    fn case_study_buckets_partition_test_users(ds in dataset(), groups in 1usize..5) {
        let ranks: Vec<RankingResult> = ds
            .test_pairs()
            .iter()
            .enumerate()
            .map(|(i, &(user, item))| RankingResult { user, item, rank: 1 + i % 4, candidates: ds.item_count() })
            .collect();
        let study = pearson_case_study(&ds, &ranks, groups, 2).unwrap();
        prop_assert_eq!(study.buckets.len(), groups);
        let mut seen: Vec<usize> = study.buckets.iter().flat_map(|b| b.users.clone()).chain(study.excluded.clone()).collect();
        seen.sort_unstable();
        let mut want: Vec<usize> = ranks.iter().map(|r| r.user).collect();
        want.sort_unstable();
        want.dedup();
        prop_assert_eq!(seen, want);

        // brute-force grouping from the per-user correlations
        let scored: Vec<(usize, f64)> = ranks.iter().filter_map(|r| user_mean_correlation(&ds, r.user).map(|c| (r.user, c))).collect();
        if let (Some(lo), Some(hi)) = (
            scored.iter().map(|x| x.1).reduce(f64::min),
            scored.iter().map(|x| x.1).reduce(f64::max),
        ) {
            for &(u, c) in &scored {
                let g = if hi > lo { (((c - lo) / (hi - lo)) * groups as f64).floor() as usize } else { 0 };
                prop_assert!(study.buckets[g.min(groups - 1)].users.contains(&u));
            }
            for b in &study.buckets {
                if let Some(rep) = &b.report {
                    let rs: Vec<usize> = ranks.iter().filter(|r| b.users.contains(&r.user)).map(|r| r.rank).collect();
                    let (hr, ndcg) = hr_ndcg(&rs, 2).unwrap();
                    prop_assert!((rep.hr - hr).abs() < 1e-10 && (rep.ndcg - ndcg).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trips(mats in prop::collection::vec((1usize..4, 1usize..4), 1..6), fill in -1e6f64..1e6) {
        let mut store = ParamStore::new();
        for (i, &(r, c)) in mats.iter().enumerate() {
            let v = (0..r * c).map(|j| fill / (1.0 + j as f64) - i as f64).collect();
            store.insert(format!("p{i}.w"), DenseMatrix::from_vec(r, c, v).unwrap());
        }
        let back = checkpoint::decode(&checkpoint::encode(&store)).unwrap();
        prop_assert_eq!(back.names(), store.names());
        for (a, b) in back.values().iter().zip(store.values()) {
            prop_assert_eq!(a, b);
        }
    }
}

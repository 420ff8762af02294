mod common;

use std::collections::BTreeMap;

use common::rng;
use glass_core::corpus::ItemId;
use glass_core::search::{augment_if_sparse, hard_search, RetrievalIndex, RetrievalPolicy};
use proptest::prelude::*;
use rand::Rng;

fn random_index(r: &mut impl Rng, len: usize, k0: usize) -> (RetrievalIndex, Vec<usize>) {
    let items: Vec<ItemId> = (0..len).map(|_| ItemId(r.random_range(0..10_000))).collect();
    let codes: Vec<usize> = (0..len).map(|_| r.random_range(0..k0)).collect();
    (RetrievalIndex::from_codes(&items, &codes), codes)
}

fn brute(codes: &[usize], a: usize, cap: usize) -> Vec<usize> {
    let all: Vec<usize> = (0..codes.len()).filter(|&p| codes[p] == a).collect();
    all[all.len().saturating_sub(cap)..].to_vec()
}

#[test]
fn hard_search_equals_brute_force_filter() {
    let mut r = rng(1);
    for q in 0..1000 {
        let len = r.random_range(0..300);
        let k0 = r.random_range(1..40);
        let (idx, codes) = random_index(&mut r, len, k0);
        let a = r.random_range(0..k0 + 2);
        let cap = r.random_range(1..50);
        let got = hard_search(&idx, a, cap);
        let want = brute(&codes, a, cap);
        assert_eq!(got.positions, want, "query {q}");
        let ids: Vec<ItemId> = want.iter().map(|&p| idx.history()[p]).collect();
        assert_eq!(got.item_ids, ids);
        assert!(!got.augmented);
    }
}

#[test]
fn augmentation_only_adds_and_respects_tau() {
    let mut r = rng(2);
    for _ in 0..500 {
        let k0 = r.random_range(2..20);
        let len = r.random_range(0..120);
        let (idx, codes) = random_index(&mut r, len, k0);
        let a = r.random_range(0..k0);
        let mut nbs: Vec<usize> = (0..k0).filter(|&b| b != a).collect();
        nbs.truncate(3);
        let tau = r.random_range(1..12);
        let cap = 1000;
        let base = hard_search(&idx, a, cap);
        let aug = augment_if_sparse(base.clone(), a, &nbs, &idx, tau, cap);
        if base.len() >= tau {
            assert_eq!(aug, base);
            continue;
        }
        assert!(aug.len() >= base.len());
        assert!(base.positions.iter().all(|p| aug.positions.contains(p)));
        assert!(aug.positions.windows(2).all(|w| w[0] < w[1]));

        // Whole neighbor buckets are merged in order until tau is reached.
        let mut want = base.positions.clone();
        for &nb in &nbs {
            if want.len() >= tau {
                break;
            }
            want.extend((0..codes.len()).filter(|&p| codes[p] == nb));
        }
        want.sort_unstable();
        assert_eq!(aug.positions, want);
    }
}

#[test]
fn tau_boundary() {
    let items: Vec<ItemId> = (0..8).map(ItemId).collect();
    let codes = [0, 0, 0, 1, 1, 2, 2, 2];
    let idx = RetrievalIndex::from_codes(&items, &codes);
    let policy = |tau| RetrievalPolicy { cap: 64, augment: true, tau };
    let dict: BTreeMap<usize, Vec<usize>> = [(0, vec![2, 1]), (1, vec![0]), (2, vec![0])].into_iter().collect();

    let at = policy(3).retrieve(&idx, 0, &dict);
    assert_eq!(at.positions, vec![0, 1, 2]);
    assert!(!at.augmented);

    let above = policy(4).retrieve(&idx, 0, &dict);
    assert_eq!(above.positions, vec![0, 1, 2, 5, 6, 7]);
    assert!(above.augmented);
    assert_eq!(above.source_codewords, vec![0, 2]);
}

#[test]
fn uniform_histories_retrieve_about_l_over_k0() {
    let mut r = rng(7);
    let (l, k0, users) = (1000, 128, 400);
    let mut total = 0usize;
    for _ in 0..users {
        let (idx, _) = random_index(&mut r, l, k0);
        total += hard_search(&idx, r.random_range(0..k0), usize::MAX).len();
    }
    let mean = total as f64 / users as f64;
    println!("mean retrieved length {mean:.3} (L/K0 = {:.3})", l as f64 / k0 as f64);
    assert!((mean - 7.8).abs() <= 1.0, "{mean}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn results_are_ascending_capped_and_keyed(seed in 0u64..10_000, cap in 1usize..30) {
        let mut r = rng(seed);
        let (idx, codes) = random_index(&mut r, 150, 10);
        let a = r.random_range(0..10);
        let got = hard_search(&idx, a, cap);
        prop_assert!(got.len() <= cap);
        prop_assert!(got.positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(got.positions.iter().all(|&p| codes[p] == a));
    }
}

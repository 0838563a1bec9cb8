use std::collections::{BTreeMap, BTreeSet};

use adsource::funnel::{auction, Bidder, RankWeights};
use adsource::metrics::{ads_value, auction_recall, by_adjust, recall, rncg, t1ps, utility};
use adsource::world::{AdId, AdvertiserId, CampaignId};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sets(rng: &mut ChaCha8Rng, n: usize, universe: u32, density: f64) -> Vec<BTreeSet<u32>> {
    (0..n)
        .map(|_| (0..universe).filter(|_| rng.random_bool(density)).collect())
        .collect()
}

#[test]
fn recall_matches_naive_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cands = random_sets(&mut rng, 100, 60, 0.3);
    let engaged = random_sets(&mut rng, 100, 60, 0.05);
    let (mut tp, mut fn_) = (0, 0);
    for (c, e) in cands.iter().zip(&engaged) {
        for x in e {
            if c.contains(x) {
                tp += 1;
            } else {
                fn_ += 1;
            }
        }
    }
    let got = recall(&cands, &engaged).unwrap().unwrap();
    assert_eq!(got, tp as f64 / (tp + fn_) as f64);
    let everything: Vec<BTreeSet<u32>> = vec![(0..60).collect(); 100];
    assert_eq!(recall(&everything, &engaged).unwrap(), Some(1.0));
}

#[test]
fn auction_recall_matches_brute_force_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut cands = Vec::new();
    let mut winners = Vec::new();
    let (mut hits, mut slots) = (0, 0);
    for _ in 0..50 {
        let bidders: Vec<Bidder> = (0..40)
            .map(|i| Bidder {
                ad_id: AdId(i),
                rankscore: rng.random_range(0.0..3.0),
                bid: rng.random_range(0.5..4.0),
            })
            .collect();
        let won: BTreeSet<u32> = auction(&bidders, 2, 0.0)
            .unwrap()
            .slots
            .iter()
            .map(|s| s.ad_id.0)
            .collect();
        let c: BTreeSet<u32> = (0..40).filter(|_| rng.random_bool(0.4)).collect();
        for w in &won {
            slots += 1;
            if c.contains(w) {
                hits += 1;
            }
        }
        cands.push(c);
        winners.push(won);
    }
    assert_eq!(
        auction_recall(&cands, &winners).unwrap(),
        Some(hits as f64 / slots as f64)
    );
    let full: Vec<BTreeSet<u32>> = vec![(0..40).collect(); 50];
    assert_eq!(auction_recall(&full, &winners).unwrap(), Some(1.0));
}

#[test]
fn ads_value_matches_naive_loop() {
    let campaigns: BTreeMap<CampaignId, (f64, u64)> = [
        (CampaignId(0), (100.0, 10)),
        (CampaignId(1), (45.0, 3)),
        (CampaignId(2), (9.0, 0)),
    ]
    .into_iter()
    .collect();
    let bucket: BTreeMap<CampaignId, u64> =
        [(CampaignId(0), 2), (CampaignId(1), 4), (CampaignId(2), 1)]
            .into_iter()
            .collect();
    let v = ads_value(&campaigns, &bucket);
    assert!((v.value - (10.0 * 2.0 + 15.0 * 4.0)).abs() < 1e-12);
    assert_eq!(v.skipped_campaigns, 1);
}

#[test]
fn utility_of_a_perfect_prediction_is_mean_rankscore() {
    let w = RankWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let imps: Vec<(f64, bool, bool)> = (0..500)
        .map(|_| {
            let eng = rng.random_bool(0.2);
            (
                rng.random_range(0.5..5.0),
                eng,
                !eng && rng.random_bool(0.1),
            )
        })
        .collect();
    let mean_rs: f64 = imps
        .iter()
        .map(|&(bid, e, n)| bid * e as u8 as f64 - w.w_neg * bid * n as u8 as f64)
        .sum::<f64>()
        / imps.len() as f64;
    assert!((utility(&imps, &w) - 1000.0 * mean_rs).abs() < 1e-9);
}

#[test]
fn rncg_is_monotone_in_the_candidate_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut violations = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(1..30);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let c_big: Vec<f64> = r.iter().copied().filter(|_| rng.random_bool(0.6)).collect();
        let c_small: Vec<f64> = c_big
            .iter()
            .copied()
            .filter(|_| rng.random_bool(0.6))
            .collect();
        let m = rng.random_range(1..8);
        let small = rncg(std::slice::from_ref(&r), &[c_small], m).unwrap();
        let big = rncg(std::slice::from_ref(&r), &[c_big], m).unwrap();
        if small > big {
            violations += 1;
        }
        assert!((0.0..=1.0 + 1e-12).contains(&big));
    }
    assert_eq!(violations, 0);
}

proptest! {
    #[test]
    fn by_adjust_dominates_and_commutes_with_permutation(
        ps in prop::collection::vec(0.0f64..=1.0, 1..20),
        seed in any::<u64>(),
    ) {
        let adj = by_adjust(&ps).unwrap();
        for (a, p) in adj.iter().zip(&ps) {
            prop_assert!(a >= p && *a <= 1.0);
        }
        let mut order: Vec<usize> = (0..ps.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<f64> = order.iter().map(|&i| ps[i]).collect();
        let adj_permuted = by_adjust(&permuted).unwrap();
        for (k, &i) in order.iter().enumerate() {
            prop_assert_eq!(adj_permuted[k], adj[i]);
        }
    }

    #[test]
    fn t1ps_grows_with_the_top_advertiser(counts in prop::collection::vec(1u64..50, 1..300), extra in 1u64..100) {
        let served: BTreeMap<AdvertiserId, u64> =
            counts.iter().enumerate().map(|(i, &c)| (AdvertiserId(i as u32), c)).collect();
        let before = t1ps(&served);
        let top = served.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(a, _)| *a).unwrap();
        let mut more = served.clone();
        *more.get_mut(&top).unwrap() += extra;
        prop_assert!(t1ps(&more) >= before);
        prop_assert!(before <= 1.0 && before > 0.0);
        let equal: BTreeMap<AdvertiserId, u64> = (0..counts.len() as u32).map(|i| (AdvertiserId(i), 3)).collect();
        let n = counts.len();
        prop_assert!((t1ps(&equal) - n.div_ceil(100) as f64 / n as f64).abs() < 1e-12);
    }
}

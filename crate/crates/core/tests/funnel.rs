use std::collections::BTreeSet;

use adsource::embed::TrainParams;
use adsource::funnel::{
    auction, heavy_rank, in_treatment, is_uas_sampled, light_rank, rankscore, run_experiment,
    simulate, target_filter, train_light_ranker, uas_log, ArmLog, Bidder, FunnelConfig,
    LightRankerParams, RankWeights, SimConfig, Simulation, TargetingCache,
};
use adsource::metrics::{auc, compare, BootstrapParams};
use adsource::sourcing::BlendConfig;
use adsource::world::{
    gen_requests, gen_world, AdId, EventRecord, EventType, UserId, World, WorldConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_world() -> World {
    gen_world(&WorldConfig {
        n_users: 300,
        n_advertisers: 40,
        n_ads: 800,
        seed: 9,
        ..WorldConfig::default()
    })
    .unwrap()
}

fn small_sim() -> SimConfig {
    SimConfig {
        n_requests: 1_500,
        bootstrap_requests: 1_500,
        k_source: 50,
        train: TrainParams {
            dim: 16,
            epochs: 3,
            negatives_batch: 16,
            negatives_uniform: 16,
            batch_size: 128,
            ..SimConfig::default().train
        },
        ..SimConfig::default()
    }
}

fn small_funnel() -> FunnelConfig {
    FunnelConfig {
        k: 30,
        ..FunnelConfig::default()
    }
}

#[test]
fn target_filter_matches_brute_force_predicate() {
    let world = gen_world(&WorldConfig {
        n_ads: 500,
        ..WorldConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let budgets: Vec<f64> = world
        .ads
        .iter()
        .map(|a| {
            if rng.random_bool(0.2) {
                0.0
            } else {
                a.remaining_budget
            }
        })
        .collect();
    for user in world.users.iter().step_by(7) {
        let expected: Vec<AdId> = world
            .ads
            .iter()
            .filter(|ad| {
                let h = &ad.hard_targeting;
                let s = &ad.soft_targeting;
                let hard = (h.geo_set.is_empty() || h.geo_set.contains(&user.geo))
                    && (h.language_set.is_empty() || h.language_set.contains(&user.language))
                    && (h.age_set.is_empty() || h.age_set.contains(&user.age_band));
                let soft = (s.follow_set.is_empty() && s.topic_set.is_empty())
                    || s.follow_set.iter().any(|f| user.followings.contains(f))
                    || s.topic_set.iter().any(|t| user.topics.contains(t));
                hard && soft && budgets[ad.id.index()] > 0.0
            })
            .map(|ad| ad.id)
            .collect();
        assert_eq!(
            target_filter(user, &world.ads, &budgets),
            expected,
            "user {}",
            user.id.0
        );
        assert_eq!(
            TargetingCache::new(&world).eligible(user.id, &budgets),
            expected
        );
    }
}

#[test]
fn heavy_noise_has_the_normal_mean_absolute_deviation() {
    let world = gen_world(&WorldConfig::default()).unwrap();
    let sigma = 0.01;
    let ads: Vec<AdId> = world.ads.iter().map(|a| a.id).collect();
    let mut deviations = Vec::new();
    for u in world.users.iter().take(200) {
        for s in heavy_rank(&world, 4, u.id, &ads[..500], sigma).unwrap() {
            if s.p_true > 4.0 * sigma && s.p_true < 1.0 - 4.0 * sigma {
                deviations.push((s.p_eng - s.p_true).abs());
            }
        }
    }
    let n = deviations.len() as f64;
    let mad = deviations.iter().sum::<f64>() / n;
    let expected = sigma * (2.0 / std::f64::consts::PI).sqrt();
    // |N(0, σ²)| has variance σ²(1 − 2/π).
    let se = sigma * (1.0 - 2.0 / std::f64::consts::PI).sqrt() / n.sqrt();
    assert!(
        (mad - expected).abs() < 4.0 * se,
        "mad {mad} expected {expected}"
    );
    let zero = heavy_rank(&world, 4, UserId(0), &ads[..50], 0.0).unwrap();
    assert!(zero.iter().all(|s| s.p_eng == s.p_true));
}

#[test]
fn uas_samples_at_rate_and_logs_consistent_rankscores() {
    let world = small_world();
    let requests = gen_requests(&world, 10_000, 86_400).unwrap();
    let config = small_funnel();
    let budgets = world.initial_budgets();
    let log = uas_log(&world, &requests, 0.02, &config, 1, &budgets).unwrap();
    let sampled: BTreeSet<u64> = log.iter().map(|r| r.request_id).collect();
    let expected: BTreeSet<u64> = requests
        .iter()
        .filter(|r| is_uas_sampled(1, r.request_id, 0.02))
        .map(|r| r.request_id)
        .collect();
    assert!(sampled.is_subset(&expected));
    let sd = (10_000.0f64 * 0.02 * 0.98).sqrt();
    assert!(
        (expected.len() as f64 - 200.0).abs() < 3.0 * sd,
        "{}",
        expected.len()
    );
    let w = config.weights();
    for r in &log {
        assert_eq!(r.rankscore, rankscore(r.bid, r.p_eng, r.p_neg, &w));
    }
    let cache = TargetingCache::new(&world);
    let one = &requests[0];
    let all = uas_log(&world, std::slice::from_ref(one), 1.0, &config, 1, &budgets).unwrap();
    assert_eq!(all.len(), cache.eligible(one.user_id, &budgets).len());
    assert!(uas_log(&world, &requests, 0.0, &config, 1, &budgets).is_err());
}

#[test]
fn bucket_share_is_binomial() {
    let n = 10_000u64;
    let treated = (0..n).filter(|&r| in_treatment(21, r, 0.02)).count() as f64;
    let sd = (n as f64 * 0.02 * 0.98).sqrt();
    assert!((treated - 200.0).abs() < 3.0 * sd, "{treated}");
}

#[test]
fn light_ranker_separates_held_out_engagements() {
    let world = gen_world(&WorldConfig::default()).unwrap();
    let config = SimConfig {
        n_requests: 1,
        ..SimConfig::default()
    };
    let sim = Simulation::prepare(&world, &config, &FunnelConfig::default()).unwrap();
    let events = sim.bootstrap_events();
    let cut = events[events.len() * 4 / 5].ts;
    let (train, held_out): (Vec<EventRecord>, Vec<EventRecord>) =
        events.iter().cloned().partition(|e| e.ts < cut);
    let ranker = train_light_ranker(&train, &world, &LightRankerParams::default()).unwrap();
    let engaged: BTreeSet<(u64, UserId, AdId)> = held_out
        .iter()
        .filter(|e| e.event == EventType::PositiveEngagement)
        .map(|e| (e.ts, e.user_id, e.ad_id))
        .collect();
    let impressions: Vec<&EventRecord> = held_out
        .iter()
        .filter(|e| e.event == EventType::Impression)
        .collect();
    let scores: Vec<f64> = impressions
        .iter()
        .map(|i| ranker.p_click(i.user_id, i.ad_id).unwrap())
        .collect();
    let labels: Vec<bool> = impressions
        .iter()
        .map(|i| engaged.contains(&(i.ts, i.user_id, i.ad_id)))
        .collect();
    let a = auc(&scores, &labels).unwrap().unwrap();
    assert!(a > 0.55, "auc {a}");
    assert!(scores.iter().all(|&p| p > 0.0 && p < 1.0));
    let eligible = TargetingCache::new(&world).eligible(UserId(0), &world.initial_budgets());
    let top = light_rank(&ranker, &world, UserId(0), &eligible, 10).unwrap();
    assert_eq!(top.len(), 10.min(eligible.len()));
}

#[test]
fn light_rank_equals_naive_sort() {
    let world = gen_world(&WorldConfig::default()).unwrap();
    let sim = Simulation::prepare(
        &world,
        &SimConfig {
            n_requests: 1,
            bootstrap_requests: 3_000,
            ..SimConfig::default()
        },
        &FunnelConfig::default(),
    )
    .unwrap();
    let ranker = sim.light_ranker();
    let user = UserId(5);
    let eligible: Vec<AdId> =
        TargetingCache::new(&world).eligible(user, &world.initial_budgets())[..200].to_vec();
    let mut naive: Vec<(f64, AdId)> = eligible
        .iter()
        .map(|&a| {
            (
                ranker.p_click(user, a).unwrap() * world.ads[a.index()].bid,
                a,
            )
        })
        .collect();
    naive.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
    let expected: Vec<AdId> = naive.iter().take(50).map(|x| x.1).collect();
    assert_eq!(
        light_rank(ranker, &world, user, &eligible, 50).unwrap(),
        expected
    );
}

fn identical(a: &ArmLog, b: &ArmLog) -> bool {
    a.requests.len() == b.requests.len()
        && a.requests.iter().zip(&b.requests).all(|(x, y)| {
            x.request_id == y.request_id
                && x.overall == y.overall
                && x.by_objective == y.by_objective
                && x.n_candidates == y.n_candidates
        })
        && a.impressions.len() == b.impressions.len()
        && a.impressions.iter().zip(&b.impressions).all(|(x, y)| {
            (
                x.request_id,
                x.ad_id,
                x.price,
                x.positive,
                x.negative,
                x.converted,
            ) == (
                y.request_id,
                y.ad_id,
                y.price,
                y.positive,
                y.negative,
                y.converted,
            )
        })
}

#[test]
fn aa_experiment_is_neutral() {
    let world = small_world();
    let control = small_funnel().with_blend(BlendConfig::single("rankscore", 0.2).unwrap());
    let (c, t) = run_experiment(&world, &small_sim(), &control, &control, 0.3).unwrap();
    assert!(identical(&c, &t));
    let report = compare(
        &world,
        &c,
        &t,
        &RankWeights::default(),
        &BootstrapParams {
            resamples: 200,
            seed: 1,
        },
    )
    .unwrap();
    assert!(report.bucket_requests > 0);
    for d in &report.deltas {
        assert_eq!(d.control, d.treatment, "{}", d.metric);
        assert!(d.delta_pct.is_none_or(|x| x == 0.0), "{}", d.metric);
    }
    let treated = t.requests.iter().filter(|r| r.treated).count();
    assert_eq!(treated, report.bucket_requests);
    assert!(run_experiment(&world, &small_sim(), &control, &control, 1.0).is_err());
}

#[test]
fn noiseless_control_funnel_is_deterministic() {
    let world = small_world();
    let control = FunnelConfig {
        noise_sigma: 0.0,
        ..small_funnel()
    };
    let a = simulate(&world, &small_sim(), &control, &[]).unwrap();
    let b = simulate(&world, &small_sim(), &control, &[]).unwrap();
    assert_eq!(a, b);
    assert!(!a[0].impressions.is_empty());
}

#[test]
fn arm_log_round_trips() {
    let world = small_world();
    let logs = simulate(&world, &small_sim(), &small_funnel(), &[]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    logs[0].save(dir.path()).unwrap();
    assert_eq!(ArmLog::load(dir.path(), &logs[0].name).unwrap(), logs[0]);
}

#[test]
fn simulated_tallies_are_consistent() {
    let world = small_world();
    let treatment = small_funnel().with_blend(
        BlendConfig::new(
            [("rankscore".to_string(), 0.2), ("graph".to_string(), 0.2)],
            0.4,
        )
        .unwrap(),
    );
    let logs = simulate(
        &world,
        &small_sim(),
        &small_funnel(),
        &[("blend".into(), treatment.clone())],
    )
    .unwrap();
    for log in &logs {
        for r in &log.requests {
            assert!(r.overall.engaged_hit <= r.overall.engaged);
            assert!(r.overall.winners_hit <= r.overall.winners);
            assert!(r.overall.winners as usize <= treatment.n_slots);
            assert!(r.overall.rncg_num <= r.overall.rncg_den + 1e-12);
            assert!(r.n_candidates <= r.n_eligible);
            assert!(r.n_candidates as usize <= treatment.k);
            let sum: u32 = r.by_objective.iter().map(|t| t.engaged).sum();
            assert_eq!(sum, r.overall.engaged);
        }
        for i in &log.impressions {
            assert!(i.price >= 0.0 && i.price <= i.bid);
        }
    }
    assert!(simulate(
        &world,
        &small_sim(),
        &small_funnel(),
        &[(
            "x".into(),
            small_funnel().with_blend(BlendConfig::single("nope", 0.1).unwrap())
        )]
    )
    .is_err());
}

fn bidders() -> impl Strategy<Value = Vec<Bidder>> {
    prop::collection::vec((0.0f64..5.0, 0.1f64..10.0), 0..30).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (rs, bid))| Bidder {
                ad_id: AdId(i as u32),
                rankscore: if rs < 0.5 { 0.0 } else { rs },
                bid,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn gsp_prices_lie_between_reserve_and_bid(bs in bidders(), n_slots in 1usize..5, reserve in 0.0f64..3.0) {
        let r = auction(&bs, n_slots, reserve).unwrap();
        prop_assert!(r.slots.len() <= n_slots);
        prop_assert_eq!(r.slots.len() + r.losers.len(), bs.len());
        for s in &r.slots {
            prop_assert!(reserve <= s.price && s.price <= s.bid, "{:?}", s);
            prop_assert!(s.rankscore > 0.0);
        }
        for w in r.slots.windows(2) {
            prop_assert!(w[0].rankscore >= w[1].rankscore);
        }
    }

    #[test]
    fn enlarging_candidates_never_lowers_winning_rankscore(bs in bidders(), keep in prop::collection::vec(any::<bool>(), 30), n_slots in 1usize..4) {
        let subset: Vec<Bidder> = bs.iter().zip(&keep).filter(|(_, k)| **k).map(|(b, _)| *b).collect();
        let small = auction(&subset, n_slots, 0.0).unwrap();
        let large = auction(&bs, n_slots, 0.0).unwrap();
        let top = |r: &adsource::funnel::AuctionResult| r.slots.first().map_or(0.0, |s| s.rankscore);
        prop_assert!(top(&large) >= top(&small));
        for (i, s) in small.slots.iter().enumerate() {
            prop_assert!(large.slots[i].rankscore >= s.rankscore);
        }
    }
}

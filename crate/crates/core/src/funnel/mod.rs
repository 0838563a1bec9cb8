//! The serving funnel: targeting, light ranking, heavy ranking, the
//! generalized second-price auction, counterfactual logging, and the
//! simulator that runs A/B arms over a request stream.

mod auction;
mod light;
mod sim;
mod uas;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use rand::seq::index;

use crate::rng::{self, keyed_normal, tags};
use crate::sourcing::BlendConfig;
use crate::world::{
    sample_engagements, Ad, AdId, EventLog, ImpressionEvent, Request, User, UserId, World,
};

pub use auction::{auction, AuctionResult, Bidder, Slot};
pub use light::{light_rank, train_light_ranker, LightRanker, LightRankerParams};
pub use sim::{
    in_treatment, run_experiment, simulate, ArmLog, ArmSpec, Cadences, ImpressionRecord, IndexKind,
    ObjectiveTally, RequestRecord, SimConfig, Simulation,
};
pub use uas::{is_uas_sampled, uas_log};

/// Weights turning heavy-ranker probabilities into a rankscore.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankWeights {
    pub w_neg: f64,
    pub reserve_price: f64,
}

impl Default for RankWeights {
    fn default() -> Self {
        RankWeights {
            w_neg: 0.5,
            reserve_price: 0.0,
        }
    }
}

impl RankWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_neg >= 0.0 && self.w_neg.is_finite()) {
            return Err(Error::config("w_neg", "must be finite and non-negative"));
        }
        if !(self.reserve_price >= 0.0 && self.reserve_price.is_finite()) {
            return Err(Error::config(
                "reserve_price",
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// `max(0, bid·p_eng − w_neg·bid·p_neg)`.
pub fn rankscore(bid: f64, p_eng: f64, p_neg: f64, w: &RankWeights) -> f64 {
    (bid * p_eng - w.w_neg * bid * p_neg).max(0.0)
}

/// Per-arm serving configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FunnelConfig {
    /// Candidates sent from candidate generation to the heavy ranker.
    pub k: usize,
    pub n_slots: usize,
    pub noise_sigma: f64,
    pub w_neg: f64,
    pub reserve_price: f64,
    pub blend: BlendConfig,
}

impl Default for FunnelConfig {
    fn default() -> Self {
        FunnelConfig {
            k: 100,
            n_slots: 2,
            noise_sigma: 0.05,
            w_neg: 0.5,
            reserve_price: 0.0,
            blend: BlendConfig::control(),
        }
    }
}

impl FunnelConfig {
    pub fn weights(&self) -> RankWeights {
        RankWeights {
            w_neg: self.w_neg,
            reserve_price: self.reserve_price,
        }
    }

    pub fn with_blend(&self, blend: BlendConfig) -> Self {
        FunnelConfig {
            blend,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if self.n_slots == 0 {
            return Err(Error::config("n_slots", "must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(
                "noise_sigma",
                "must be finite and non-negative",
            ));
        }
        self.weights().validate()?;
        self.blend.validate()
    }
}

/// Hard clauses all satisfied, at least one soft clause satisfied (or none
/// declared), and budget left.
pub fn is_eligible(user: &User, ad: &Ad, budget: f64) -> bool {
    budget > 0.0 && ad.hard_targeting.matches(user) && ad.soft_targeting.matches(user)
}

/// Ads eligible for `user`, in ascending id order.
pub fn target_filter(user: &User, ads: &[Ad], budgets: &[f64]) -> Vec<AdId> {
    ads.iter()
        .filter(|a| is_eligible(user, a, budgets.get(a.id.index()).copied().unwrap_or(0.0)))
        .map(|a| a.id)
        .collect()
}

/// Per-user list of ads whose targeting admits the user, ignoring budgets.
/// Targeting is static, so this is computed once per world.
#[derive(Clone, Debug)]
pub struct TargetingCache {
    per_user: Vec<Vec<AdId>>,
}

impl TargetingCache {
    pub fn new(world: &World) -> Self {
        let unlimited = vec![f64::INFINITY; world.ads.len()];
        TargetingCache {
            per_user: world
                .users
                .iter()
                .map(|u| target_filter(u, &world.ads, &unlimited))
                .collect(),
        }
    }

    pub fn targeted(&self, user: UserId) -> &[AdId] {
        self.per_user
            .get(user.index())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn admits(&self, user: UserId, ad: AdId) -> bool {
        self.targeted(user).binary_search(&ad).is_ok()
    }

    /// Targeted ads with budget left.
    pub fn eligible(&self, user: UserId, budgets: &[f64]) -> Vec<AdId> {
        self.targeted(user)
            .iter()
            .copied()
            .filter(|a| budgets[a.index()] > 0.0)
            .collect()
    }
}

/// Exploration traffic: each request shows up to `n_slots` eligible ads
/// drawn uniformly without replacement, with engagements from the world
/// oracle. Budgets are not consumed.
pub fn random_serving_events(
    world: &World,
    requests: &[Request],
    n_slots: usize,
    seed: u64,
) -> Result<EventLog> {
    if n_slots == 0 {
        return Err(Error::config("n_slots", "must be at least 1"));
    }
    let targeting = TargetingCache::new(world);
    let budgets = world.initial_budgets();
    let mut shown = Vec::new();
    for req in requests {
        let eligible = targeting.eligible(req.user_id, &budgets);
        let mut rng = rng::stream(rng::mix(seed, &[req.request_id]), tags::BOOTSTRAP_SERVE);
        for i in index::sample(&mut rng, eligible.len(), n_slots.min(eligible.len())) {
            shown.push(ImpressionEvent {
                ts: req.ts,
                user_id: req.user_id,
                ad_id: eligible[i],
            });
        }
    }
    sample_engagements(world, &shown)
}

/// Heavy-ranker output for one ad.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeavyScore {
    pub ad_id: AdId,
    /// Ground-truth positive engagement probability.
    pub p_true: f64,
    pub p_eng: f64,
    pub p_neg: f64,
}

/// Oracle probabilities plus Gaussian noise, clamped to `[0, 1]`. The noise
/// is keyed by `(seed, user, ad)`, so the heavy ranker errs consistently on a
/// given pair the way a fixed model would.
pub fn heavy_rank(
    world: &World,
    seed: u64,
    user: UserId,
    cands: &[AdId],
    noise_sigma: f64,
) -> Result<Vec<HeavyScore>> {
    cands
        .iter()
        .map(|&ad_id| {
            let truth = world.true_engagement_prob(user, ad_id)?;
            Ok(HeavyScore {
                ad_id,
                p_true: truth.p_pos,
                p_eng: noisy(
                    truth.p_pos,
                    seed ^ tags::HEAVY_POS,
                    user,
                    ad_id,
                    noise_sigma,
                ),
                p_neg: noisy(
                    truth.p_neg,
                    seed ^ tags::HEAVY_NEG,
                    user,
                    ad_id,
                    noise_sigma,
                ),
            })
        })
        .collect()
}

#[inline]
fn noisy(p: f64, seed: u64, user: UserId, ad: AdId, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return p;
    }
    (p + sigma * keyed_normal(seed, &[user.0 as u64, ad.0 as u64])).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{gen_world, HardTargeting, SoftTargeting, WorldConfig};

    fn small_world() -> World {
        gen_world(&WorldConfig {
            n_users: 40,
            n_advertisers: 8,
            n_ads: 200,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn rankscore_examples() {
        let w = RankWeights::default();
        assert_eq!(rankscore(3.0, 0.0, 0.0, &w), 0.0);
        assert!((rankscore(10.0, 0.2, 0.1, &w) - 1.5).abs() < 1e-12);
        assert!((rankscore(30.0, 0.2, 0.1, &w) - 4.5).abs() < 1e-12);
        assert_eq!(rankscore(1.0, 0.0, 0.5, &w), 0.0);
    }

    #[test]
    fn hard_and_soft_clauses() {
        let world = small_world();
        let user = world.users[0].clone();
        let mut ad = world.ads[0].clone();
        ad.hard_targeting = HardTargeting::default();
        ad.soft_targeting = SoftTargeting::default();
        assert!(is_eligible(&user, &ad, 1.0));
        assert!(!is_eligible(&user, &ad, 0.0));
        ad.hard_targeting.geo_set = vec![user.geo + 1];
        assert!(!is_eligible(&user, &ad, 1.0));
        ad.hard_targeting.geo_set = vec![user.geo];
        ad.soft_targeting.topic_set = vec![99];
        assert!(!is_eligible(&user, &ad, 1.0));
        ad.soft_targeting.follow_set = vec![user.followings[0]];
        assert!(is_eligible(&user, &ad, 1.0));
    }

    #[test]
    fn zero_noise_is_the_oracle() {
        let world = small_world();
        let ads: Vec<AdId> = (0..50).map(AdId).collect();
        for s in heavy_rank(&world, 1, UserId(3), &ads, 0.0).unwrap() {
            let t = world.true_engagement_prob(UserId(3), s.ad_id).unwrap();
            assert_eq!((s.p_eng, s.p_neg), (t.p_pos, t.p_neg));
        }
        for s in heavy_rank(&world, 1, UserId(3), &ads, 5.0).unwrap() {
            assert!((0.0..=1.0).contains(&s.p_eng) && (0.0..=1.0).contains(&s.p_neg));
        }
    }

    #[test]
    fn targeting_cache_agrees_with_filter() {
        let world = small_world();
        let cache = TargetingCache::new(&world);
        let budgets = world.initial_budgets();
        for u in &world.users {
            assert_eq!(
                cache.eligible(u.id, &budgets),
                target_filter(u, &world.ads, &budgets)
            );
        }
    }
}

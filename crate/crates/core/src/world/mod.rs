//! Synthetic ground truth: users, advertisers, campaigns and ads, plus the
//! latent-factor engagement model every downstream component is judged against.
//!
//! Users and ads carry unit-norm latent vectors drawn around per-topic
//! centroids. The true engagement model is logistic in their inner product:
//!
//! ```text
//! p_pos(u, a) = σ( z_u·z_a + b_pos[objective(a)])
//! p_neg(u, a) = σ(−z_u·z_a + b_neg)
//! ```
//!
//! with the biases calibrated at generation time so that the population mean
//! of `p_pos` equals `base_engagement_rate`.

mod engagement;
mod requests;

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tags};

pub(crate) use engagement::{draw_outcome, would_engage};
pub use engagement::{
    sample_engagements, sample_engagements_with, EngagementProb, EventLog, EventRecord, EventType,
    ImpressionEvent,
};
pub use requests::{gen_requests, Request, RequestLog};

pub const WORLD_FORMAT_VERSION: u32 = 1;
pub const SECONDS_PER_DAY: f64 = 86_400.0;
pub const SECONDS_PER_HOUR: u64 = 3_600;

/// Seconds since the start of the simulation.
pub type Timestamp = u64;

macro_rules! id_newtype {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(
            Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_newtype!(UserId);
id_newtype!(AdId);
id_newtype!(AdvertiserId);
id_newtype!(CampaignId);

/// Log-normal distribution parameterised by its arithmetic mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormalParams {
    pub mean: f64,
    pub sigma: f64,
}

impl LogNormalParams {
    fn distribution(&self) -> LogNormal<f64> {
        let mu = self.mean.ln() - 0.5 * self.sigma * self.sigma;
        LogNormal::new(mu, self.sigma).expect("validated log-normal parameters")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_advertisers: usize,
    pub n_ads: usize,
    pub latent_dim: usize,
    pub n_geos: usize,
    pub n_languages: usize,
    pub n_age_bands: usize,
    pub n_topics: usize,
    pub bid_distribution: LogNormalParams,
    pub budget_distribution: LogNormalParams,
    pub objective_count: usize,
    pub base_engagement_rate: f64,
    pub base_negative_rate: f64,
    pub ads_per_campaign: usize,
    pub follows_per_user: usize,
    /// Probability that a following is drawn from the user's own primary topic.
    pub follow_homophily: f64,
    /// Norm of the noise added to a topic centroid before normalising.
    pub interest_noise: f64,
    /// Zipf exponent of per-user request activity.
    pub activity_zipf: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_users: 2_000,
            n_advertisers: 250,
            n_ads: 5_000,
            latent_dim: 16,
            n_geos: 6,
            n_languages: 4,
            n_age_bands: 5,
            n_topics: 20,
            bid_distribution: LogNormalParams {
                mean: 2.0,
                sigma: 0.5,
            },
            budget_distribution: LogNormalParams {
                mean: 60.0,
                sigma: 0.8,
            },
            objective_count: 5,
            base_engagement_rate: 0.1,
            base_negative_rate: 0.02,
            ads_per_campaign: 4,
            follows_per_user: 25,
            follow_homophily: 0.8,
            interest_noise: 0.6,
            activity_zipf: 1.1,
            seed: 42,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_users", self.n_users),
            ("n_advertisers", self.n_advertisers),
            ("n_ads", self.n_ads),
            ("latent_dim", self.latent_dim),
            ("n_geos", self.n_geos),
            ("n_languages", self.n_languages),
            ("n_age_bands", self.n_age_bands),
            ("n_topics", self.n_topics),
            ("objective_count", self.objective_count),
            ("ads_per_campaign", self.ads_per_campaign),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.objective_count > u8::MAX as usize {
            return Err(Error::config("objective_count", "must fit in 8 bits"));
        }
        for (field, p) in [
            ("bid_distribution", self.bid_distribution),
            ("budget_distribution", self.budget_distribution),
        ] {
            if !(p.mean > 0.0 && p.mean.is_finite()) {
                return Err(Error::config(format!("{field}.mean"), "must be positive"));
            }
            if !(p.sigma >= 0.0 && p.sigma.is_finite()) {
                return Err(Error::config(
                    format!("{field}.sigma"),
                    "must be non-negative",
                ));
            }
        }
        for (field, p) in [
            ("base_engagement_rate", self.base_engagement_rate),
            ("base_negative_rate", self.base_negative_rate),
        ] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::config(field, "must lie strictly inside (0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.follow_homophily) {
            return Err(Error::config("follow_homophily", "must lie in [0, 1]"));
        }
        if !(self.interest_noise >= 0.0 && self.interest_noise.is_finite()) {
            return Err(Error::config("interest_noise", "must be non-negative"));
        }
        if !(self.activity_zipf >= 0.0 && self.activity_zipf.is_finite()) {
            return Err(Error::config("activity_zipf", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub id: UserId,
    pub latent: Vec<f64>,
    pub geo: u32,
    pub language: u32,
    pub age_band: u32,
    /// Sorted topic ids; the first-drawn primary topic is always present.
    pub topics: Vec<u32>,
    pub primary_topic: u32,
    /// Sorted, distinct, never contains the user itself.
    pub followings: Vec<UserId>,
}

impl User {
    pub fn follows(&self, other: UserId) -> bool {
        self.followings.binary_search(&other).is_ok()
    }

    pub fn has_topic(&self, topic: u32) -> bool {
        self.topics.binary_search(&topic).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Advertiser {
    pub id: AdvertiserId,
    pub topic: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub id: CampaignId,
    pub advertiser_id: AdvertiserId,
    pub objective: u8,
    pub conversion_rate: f64,
}

/// AND-combined constraints. An empty set leaves that attribute unconstrained.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HardTargeting {
    pub geo_set: Vec<u32>,
    pub language_set: Vec<u32>,
    pub age_set: Vec<u32>,
}

impl HardTargeting {
    pub fn matches(&self, user: &User) -> bool {
        let ok = |set: &[u32], v: u32| set.is_empty() || set.binary_search(&v).is_ok();
        ok(&self.geo_set, user.geo)
            && ok(&self.language_set, user.language)
            && ok(&self.age_set, user.age_band)
    }
}

/// OR-combined constraints. Empty overall means unconstrained.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SoftTargeting {
    pub follow_set: Vec<UserId>,
    pub topic_set: Vec<u32>,
}

impl SoftTargeting {
    pub fn is_empty(&self) -> bool {
        self.follow_set.is_empty() && self.topic_set.is_empty()
    }

    pub fn matches(&self, user: &User) -> bool {
        self.is_empty()
            || self.follow_set.iter().any(|&f| user.follows(f))
            || self.topic_set.iter().any(|&t| user.has_topic(t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ad {
    pub id: AdId,
    pub advertiser_id: AdvertiserId,
    pub campaign_id: CampaignId,
    pub objective: u8,
    pub latent: Vec<f64>,
    pub bid: f64,
    pub remaining_budget: f64,
    pub hard_targeting: HardTargeting,
    pub soft_targeting: SoftTargeting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub format_version: u32,
    pub config: WorldConfig,
    pub users: Vec<User>,
    pub advertisers: Vec<Advertiser>,
    pub campaigns: Vec<Campaign>,
    pub ads: Vec<Ad>,
    /// Positive-engagement bias per objective (index `objective - 1`).
    pub pos_bias: Vec<f64>,
    pub neg_bias: f64,
}

impl World {
    pub fn user(&self, id: UserId) -> Result<&User> {
        self.users.get(id.index()).ok_or(Error::Lookup {
            kind: "user",
            id: id.0 as u64,
        })
    }

    pub fn ad(&self, id: AdId) -> Result<&Ad> {
        self.ads.get(id.index()).ok_or(Error::Lookup {
            kind: "ad",
            id: id.0 as u64,
        })
    }

    pub fn campaign(&self, id: CampaignId) -> Result<&Campaign> {
        self.campaigns.get(id.index()).ok_or(Error::Lookup {
            kind: "campaign",
            id: id.0 as u64,
        })
    }

    pub fn pos_bias(&self, objective: u8) -> f64 {
        self.pos_bias[objective as usize - 1]
    }

    /// Initial budget of every ad, indexed by ad id.
    pub fn initial_budgets(&self) -> Vec<f64> {
        self.ads.iter().map(|a| a.remaining_budget).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    /// Loads a world document, refusing unknown format versions.
    pub fn load(path: &Path) -> Result<World> {
        let world: World = crate::io::read_json(path)?;
        if world.format_version != WORLD_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "world format version {} (expected {WORLD_FORMAT_VERSION})",
                world.format_version
            )));
        }
        Ok(world)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn objective_offset(objective_index: usize) -> f64 {
    0.15 * ((objective_index % 5) as f64 - 2.0)
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Some(u) = normalized(v) {
            return u;
        }
    }
}

fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = dot(&v, &v).sqrt();
    if n < 1e-12 || !n.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

fn perturbed_unit<R: Rng>(rng: &mut R, centre: &[f64], noise: f64) -> Vec<f64> {
    let scale = noise / (centre.len() as f64).sqrt();
    loop {
        let v: Vec<f64> = centre
            .iter()
            .map(|&c| {
                let g: f64 = StandardNormal.sample(rng);
                c + scale * g
            })
            .collect();
        if let Some(u) = normalized(v) {
            return u;
        }
    }
}

fn sorted_subset<R: Rng>(rng: &mut R, universe: usize, lo: usize, hi: usize) -> Vec<u32> {
    let hi = hi.min(universe);
    let lo = lo.min(hi).max(1);
    let size = rng.random_range(lo..=hi);
    let mut v: Vec<u32> = index::sample(rng, universe, size)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    v.sort_unstable();
    v
}

/// Generates the synthetic universe. A pure function of `config`.
pub fn gen_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, tags::WORLD);
    let k = config.latent_dim;

    let centroids: Vec<Vec<f64>> = (0..config.n_topics)
        .map(|_| random_unit(&mut rng, k))
        .collect();

    let primary: Vec<u32> = (0..config.n_users)
        .map(|_| rng.random_range(0..config.n_topics as u32))
        .collect();
    let mut by_topic: Vec<Vec<u32>> = vec![Vec::new(); config.n_topics];
    for (u, &t) in primary.iter().enumerate() {
        by_topic[t as usize].push(u as u32);
    }

    let mut users = Vec::with_capacity(config.n_users);
    for (u, &t) in primary.iter().enumerate() {
        let latent = perturbed_unit(&mut rng, &centroids[t as usize], config.interest_noise);
        let geo = rng.random_range(0..config.n_geos as u32);
        let language = rng.random_range(0..config.n_languages as u32);
        let age_band = rng.random_range(0..config.n_age_bands as u32);
        let mut topics = vec![t];
        for other in 0..config.n_topics as u32 {
            if other != t && rng.random_bool(0.05) {
                topics.push(other);
            }
        }
        topics.sort_unstable();

        let target = config.follows_per_user.min(config.n_users - 1);
        let mut followings: Vec<UserId> = Vec::with_capacity(target);
        let same = &by_topic[t as usize];
        let mut attempts = 0;
        while followings.len() < target && attempts < target * 50 {
            attempts += 1;
            let cand = if same.len() > 1 && rng.random_bool(config.follow_homophily) {
                same[rng.random_range(0..same.len())]
            } else {
                rng.random_range(0..config.n_users as u32)
            };
            if cand as usize != u && !followings.contains(&UserId(cand)) {
                followings.push(UserId(cand));
            }
        }
        followings.sort_unstable();

        users.push(User {
            id: UserId(u as u32),
            latent,
            geo,
            language,
            age_band,
            topics,
            primary_topic: t,
            followings,
        });
    }

    let advertisers: Vec<Advertiser> = (0..config.n_advertisers)
        .map(|i| Advertiser {
            id: AdvertiserId(i as u32),
            topic: rng.random_range(0..config.n_topics as u32),
        })
        .collect();

    let n_campaigns = config.n_ads.div_ceil(config.ads_per_campaign);
    let campaigns: Vec<Campaign> = (0..n_campaigns)
        .map(|i| Campaign {
            id: CampaignId(i as u32),
            advertiser_id: AdvertiserId(rng.random_range(0..config.n_advertisers as u32)),
            objective: 1 + rng.random_range(0..config.objective_count) as u8,
            conversion_rate: rng.random_range(0.01..=0.2),
        })
        .collect();

    let bid_dist = config.bid_distribution.distribution();
    let budget_dist = config.budget_distribution.distribution();
    let mut ads = Vec::with_capacity(config.n_ads);
    for i in 0..config.n_ads {
        let campaign = &campaigns[i / config.ads_per_campaign];
        let advertiser = &advertisers[campaign.advertiser_id.index()];
        let latent = perturbed_unit(
            &mut rng,
            &centroids[advertiser.topic as usize],
            config.interest_noise,
        );
        let bid = bid_dist.sample(&mut rng);
        let budget = budget_dist.sample(&mut rng);

        let mut hard = HardTargeting::default();
        if rng.random_bool(0.3) {
            hard.geo_set = sorted_subset(&mut rng, config.n_geos, 1, 2);
        }
        if rng.random_bool(0.3) {
            hard.language_set = sorted_subset(&mut rng, config.n_languages, 1, 1);
        }
        if rng.random_bool(0.3) {
            hard.age_set = sorted_subset(&mut rng, config.n_age_bands, 2, 3);
        }
        let mut soft = SoftTargeting::default();
        if rng.random_bool(0.6) {
            soft.topic_set.push(advertiser.topic);
            if rng.random_bool(0.3) {
                let extra = rng.random_range(0..config.n_topics as u32);
                if extra != advertiser.topic {
                    soft.topic_set.push(extra);
                }
            }
            soft.topic_set.sort_unstable();
        }
        if rng.random_bool(0.2) {
            let mut f: Vec<UserId> = sorted_subset(&mut rng, config.n_users, 1, 3)
                .into_iter()
                .map(UserId)
                .collect();
            f.sort_unstable();
            soft.follow_set = f;
        }

        ads.push(Ad {
            id: AdId(i as u32),
            advertiser_id: advertiser.id,
            campaign_id: campaign.id,
            objective: campaign.objective,
            latent,
            bid,
            remaining_budget: budget,
            hard_targeting: hard,
            soft_targeting: soft,
        });
    }

    let (pos_bias, neg_bias) = calibrate(config, &users, &ads);

    Ok(World {
        format_version: WORLD_FORMAT_VERSION,
        config: config.clone(),
        users,
        advertisers,
        campaigns,
        ads,
        pos_bias,
        neg_bias,
    })
}

const CALIBRATION_PAIRS: usize = 20_000;

/// Solves for biases so the mean probability over a seeded sample of
/// (user, ad) pairs hits the configured base rates.
fn calibrate(config: &WorldConfig, users: &[User], ads: &[Ad]) -> (Vec<f64>, f64) {
    let mut rng = rng::stream(config.seed, tags::CALIBRATION);
    let pairs: Vec<(f64, usize)> = (0..CALIBRATION_PAIRS)
        .map(|_| {
            let u = &users[rng.random_range(0..users.len())];
            let a = &ads[rng.random_range(0..ads.len())];
            (dot(&u.latent, &a.latent), a.objective as usize - 1)
        })
        .collect();
    let offsets: Vec<f64> = (0..config.objective_count).map(objective_offset).collect();

    let mean_pos = |b: f64| {
        pairs
            .iter()
            .map(|&(d, o)| sigmoid(d + b + offsets[o]))
            .sum::<f64>()
            / pairs.len() as f64
    };
    let mean_neg =
        |b: f64| pairs.iter().map(|&(d, _)| sigmoid(-d + b)).sum::<f64>() / pairs.len() as f64;

    let b_pos = bisect(mean_pos, config.base_engagement_rate);
    let b_neg = bisect(mean_neg, config.base_negative_rate);
    (offsets.iter().map(|o| b_pos + o).collect(), b_neg)
}

fn bisect(f: impl Fn(f64) -> f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            n_users: 200,
            n_advertisers: 20,
            n_ads: 400,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn zero_users_is_a_config_error() {
        let cfg = WorldConfig {
            n_users: 0,
            ..small()
        };
        match gen_world(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "n_users"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn negative_sigma_is_a_config_error() {
        let mut cfg = small();
        cfg.bid_distribution.sigma = -0.1;
        match gen_world(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "bid_distribution.sigma"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = serde_json::to_string(&gen_world(&small()).unwrap()).unwrap();
        let b = serde_json::to_string(&gen_world(&small()).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(
            &gen_world(&WorldConfig {
                seed: 43,
                ..small()
            })
            .unwrap(),
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn structural_invariants() {
        let w = gen_world(&small()).unwrap();
        for (i, u) in w.users.iter().enumerate() {
            assert_eq!(u.id.index(), i);
            assert!((dot(&u.latent, &u.latent).sqrt() - 1.0).abs() < 1e-6);
            assert!(u.followings.windows(2).all(|p| p[0] < p[1]));
            assert!(u
                .followings
                .iter()
                .all(|f| f.index() < w.users.len() && *f != u.id));
        }
        for (i, a) in w.ads.iter().enumerate() {
            assert_eq!(a.id.index(), i);
            assert!(a.advertiser_id.index() < w.advertisers.len());
            assert_eq!(
                w.campaigns[a.campaign_id.index()].advertiser_id,
                a.advertiser_id
            );
            assert!((dot(&a.latent, &a.latent).sqrt() - 1.0).abs() < 1e-6);
            assert!(a.bid >= 0.0 && a.remaining_budget >= 0.0);
            assert!(a
                .hard_targeting
                .geo_set
                .iter()
                .all(|&g| (g as usize) < w.config.n_geos));
            assert!(a
                .soft_targeting
                .topic_set
                .iter()
                .all(|&t| (t as usize) < w.config.n_topics));
            assert!((1..=w.config.objective_count as u8).contains(&a.objective));
        }
    }

    #[test]
    fn hard_targeting_is_and_soft_is_or() {
        let w = gen_world(&small()).unwrap();
        let user = &w.users[0];
        let mut hard = HardTargeting::default();
        assert!(hard.matches(user));
        hard.geo_set = vec![user.geo];
        hard.language_set = vec![user.language + 1];
        assert!(!hard.matches(user));

        let mut soft = SoftTargeting::default();
        assert!(soft.matches(user));
        soft.topic_set = vec![user.topics[0]];
        soft.follow_set = vec![UserId(u32::MAX)];
        assert!(soft.matches(user));
    }
}

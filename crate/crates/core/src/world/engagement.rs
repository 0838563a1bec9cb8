use serde::{Deserialize, Serialize};

use super::{dot, sigmoid, AdId, AdvertiserId, Timestamp, UserId, World};
use crate::error::Result;
use crate::rng::{keyed_unit, tags};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EngagementProb {
    pub p_pos: f64,
    pub p_neg: f64,
}

impl World {
    /// Ground-truth engagement probabilities for showing `ad` to `user`.
    pub fn true_engagement_prob(&self, user: UserId, ad: AdId) -> Result<EngagementProb> {
        let u = self.user(user)?;
        let a = self.ad(ad)?;
        let affinity = dot(&u.latent, &a.latent);
        Ok(EngagementProb {
            p_pos: sigmoid(affinity + self.pos_bias(a.objective)),
            p_neg: sigmoid(-affinity + self.neg_bias),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Impression,
    PositiveEngagement,
    NegativeEngagement,
    Conversion,
}

/// One line of an event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub ts: Timestamp,
    pub user_id: UserId,
    pub ad_id: AdId,
    pub advertiser_id: AdvertiserId,
    pub event: EventType,
    pub objective: u8,
}

pub type EventLog = Vec<EventRecord>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImpressionEvent {
    pub ts: Timestamp,
    pub user_id: UserId,
    pub ad_id: AdId,
}

/// Outcome of a single impression, drawn from keyed uniforms so any two
/// callers observing the same `(ts, user, ad)` agree.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub(crate) struct ImpressionOutcome {
    pub positive: bool,
    pub negative: bool,
    pub converted: bool,
}

fn engagement_draw(seed: u64, imp: &ImpressionEvent) -> f64 {
    keyed_unit(
        seed ^ tags::ENGAGEMENT,
        &[imp.ts, imp.user_id.0 as u64, imp.ad_id.0 as u64],
    )
}

/// Whether the impression would produce a positive engagement; agrees with
/// [`draw_outcome`] on the same inputs.
pub(crate) fn would_engage(seed: u64, imp: &ImpressionEvent, p_pos: f64) -> bool {
    engagement_draw(seed, imp) < p_pos
}

pub(crate) fn draw_outcome(
    seed: u64,
    imp: &ImpressionEvent,
    prob: EngagementProb,
    conversion_rate: f64,
) -> ImpressionOutcome {
    let key = [imp.ts, imp.user_id.0 as u64, imp.ad_id.0 as u64];
    let u = engagement_draw(seed, imp);
    let positive = u < prob.p_pos;
    let negative = !positive && u < (prob.p_pos + prob.p_neg).min(1.0);
    let converted = positive && keyed_unit(seed ^ tags::CONVERSION, &key) < conversion_rate;
    ImpressionOutcome {
        positive,
        negative,
        converted,
    }
}

/// Samples engagement events for each impression using the world oracle.
pub fn sample_engagements(world: &World, impressions: &[ImpressionEvent]) -> Result<EventLog> {
    sample_engagements_with(world, impressions, |u, a| world.true_engagement_prob(u, a))
}

/// As [`sample_engagements`], with the engagement probabilities supplied by `prob`.
///
/// Output is ordered by timestamp; each impression record precedes its
/// engagement and conversion records.
pub fn sample_engagements_with<F>(
    world: &World,
    impressions: &[ImpressionEvent],
    prob: F,
) -> Result<EventLog>
where
    F: Fn(UserId, AdId) -> Result<EngagementProb>,
{
    let mut order: Vec<&ImpressionEvent> = impressions.iter().collect();
    order.sort_by_key(|imp| imp.ts);

    let mut log = Vec::with_capacity(impressions.len() * 2);
    for imp in order {
        world.user(imp.user_id)?;
        let ad = world.ad(imp.ad_id)?;
        let conversion_rate = world.campaign(ad.campaign_id)?.conversion_rate;
        let outcome = draw_outcome(
            world.config.seed,
            imp,
            prob(imp.user_id, imp.ad_id)?,
            conversion_rate,
        );
        let record = |event| EventRecord {
            ts: imp.ts,
            user_id: imp.user_id,
            ad_id: imp.ad_id,
            advertiser_id: ad.advertiser_id,
            event,
            objective: ad.objective,
        };
        log.push(record(EventType::Impression));
        if outcome.positive {
            log.push(record(EventType::PositiveEngagement));
        }
        if outcome.negative {
            log.push(record(EventType::NegativeEngagement));
        }
        if outcome.converted {
            log.push(record(EventType::Conversion));
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use rand::Rng;

    use super::*;
    use crate::world::{gen_world, WorldConfig};

    fn world() -> World {
        gen_world(&WorldConfig {
            n_users: 300,
            n_advertisers: 30,
            n_ads: 600,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn aligned_and_orthogonal_vectors() {
        let mut w = world();
        let obj = w.ads[0].objective;
        let mut z = vec![0.0; w.config.latent_dim];
        z[0] = 1.0;
        w.users[0].latent = z.clone();
        w.ads[0].latent = z;
        let p = w.true_engagement_prob(UserId(0), AdId(0)).unwrap();
        assert!((p.p_pos - sigmoid(1.0 + w.pos_bias(obj))).abs() < 1e-15);

        let mut perp = vec![0.0; w.config.latent_dim];
        perp[1] = 1.0;
        w.ads[0].latent = perp;
        let p = w.true_engagement_prob(UserId(0), AdId(0)).unwrap();
        assert_eq!(p.p_pos, sigmoid(w.pos_bias(obj)));
        assert_eq!(p.p_neg, sigmoid(w.neg_bias));
    }

    #[test]
    fn unknown_ids_are_lookup_errors() {
        let w = world();
        assert!(w.true_engagement_prob(UserId(10_000), AdId(0)).is_err());
        assert!(w.true_engagement_prob(UserId(0), AdId(10_000)).is_err());
    }

    #[test]
    fn empty_impressions_give_empty_log() {
        assert!(sample_engagements(&world(), &[]).unwrap().is_empty());
    }

    #[test]
    fn forced_probability_engages_everything() {
        let w = world();
        let imps: Vec<_> = (0..50)
            .map(|i| ImpressionEvent {
                ts: i,
                user_id: UserId(i as u32 % 300),
                ad_id: AdId(i as u32 % 600),
            })
            .collect();
        let log = sample_engagements_with(&w, &imps, |_, _| {
            Ok(EngagementProb {
                p_pos: 1.0,
                p_neg: 0.0,
            })
        })
        .unwrap();
        let positives = log
            .iter()
            .filter(|r| r.event == EventType::PositiveEngagement)
            .count();
        assert_eq!(positives, 50);
    }

    #[test]
    fn causality_and_order() {
        let w = world();
        let mut rng = crate::rng::stream(1, 1);
        let imps: Vec<_> = (0..2000)
            .map(|_| ImpressionEvent {
                ts: rng.random_range(0..10_000),
                user_id: UserId(rng.random_range(0..300)),
                ad_id: AdId(rng.random_range(0..600)),
            })
            .collect();
        let log = sample_engagements(&w, &imps).unwrap();
        assert!(log.windows(2).all(|p| p[0].ts <= p[1].ts));
        let mut seen = HashSet::new();
        for r in &log {
            match r.event {
                EventType::Impression => {
                    seen.insert((r.user_id, r.ad_id));
                }
                _ => assert!(seen.contains(&(r.user_id, r.ad_id))),
            }
        }
    }

    #[test]
    fn fixed_pair_frequency_within_three_sigma() {
        let w = world();
        let (u, a) = (UserId(3), AdId(7));
        let p = w.true_engagement_prob(u, a).unwrap().p_pos;
        let n = 20_000u64;
        let imps: Vec<_> = (0..n)
            .map(|ts| ImpressionEvent {
                ts,
                user_id: u,
                ad_id: a,
            })
            .collect();
        let log = sample_engagements(&w, &imps).unwrap();
        let k = log
            .iter()
            .filter(|r| r.event == EventType::PositiveEngagement)
            .count() as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (k / n as f64 - p).abs() < 3.0 * sd,
            "freq {} vs p {p}",
            k / n as f64
        );
    }
}

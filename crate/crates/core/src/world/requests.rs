use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Timestamp, UserId, World};
use crate::error::{Error, Result};
use crate::rng::{self, tags};

/// One ad request. Ids are assigned in timestamp order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub request_id: u64,
    pub ts: Timestamp,
    pub user_id: UserId,
}

pub type RequestLog = Vec<Request>;

/// Samples `n_requests` requests over `[0, time_span]` seconds. Per-user
/// activity follows a Zipf law with exponent `world.config.activity_zipf`
/// over a seeded random ranking of users.
pub fn gen_requests(world: &World, n_requests: usize, time_span: Timestamp) -> Result<RequestLog> {
    if n_requests == 0 {
        return Err(Error::config("n_requests", "must be at least 1"));
    }
    let mut rng = rng::stream(world.config.seed, tags::REQUESTS);
    let mut ranking: Vec<u32> = (0..world.users.len() as u32).collect();
    ranking.shuffle(&mut rng);
    let mut weights = vec![0.0; world.users.len()];
    for (rank, &u) in ranking.iter().enumerate() {
        weights[u as usize] = 1.0 / ((rank + 1) as f64).powf(world.config.activity_zipf);
    }
    let pick =
        WeightedIndex::new(&weights).map_err(|e| Error::config("activity_zipf", e.to_string()))?;

    let mut draws: Vec<(Timestamp, UserId)> = (0..n_requests)
        .map(|_| {
            let ts = rng.random_range(0..=time_span);
            (ts, UserId(pick.sample(&mut rng) as u32))
        })
        .collect();
    draws.sort_by_key(|&(ts, _)| ts);
    Ok(draws
        .into_iter()
        .enumerate()
        .map(|(i, (ts, user_id))| Request {
            request_id: i as u64,
            ts,
            user_id,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{gen_world, WorldConfig};

    fn world() -> World {
        gen_world(&WorldConfig {
            n_users: 500,
            n_advertisers: 10,
            n_ads: 50,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn single_request_lies_in_span() {
        let log = gen_requests(&world(), 1, 1000).unwrap();
        assert_eq!(log.len(), 1);
        assert!(log[0].ts <= 1000);
    }

    #[test]
    fn zero_requests_rejected() {
        assert!(gen_requests(&world(), 0, 10).is_err());
    }

    #[test]
    fn deterministic_and_sorted() {
        let w = world();
        let a = gen_requests(&w, 5000, 86_400).unwrap();
        let b = gen_requests(&w, 5000, 86_400).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|p| p[0].ts <= p[1].ts));
        assert!(a.iter().enumerate().all(|(i, r)| r.request_id == i as u64));
    }
}

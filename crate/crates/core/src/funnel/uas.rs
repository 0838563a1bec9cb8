use super::{heavy_rank, rankscore, FunnelConfig, TargetingCache};
use crate::error::{Error, Result};
use crate::rng::{keyed_unit, tags};
use crate::sourcing::{UasLog, UasRecord};
use crate::world::{Request, World};

/// Whether counterfactual logging samples this request.
pub fn is_uas_sampled(seed: u64, request_id: u64, sample_rate: f64) -> bool {
    keyed_unit(seed ^ tags::UAS, &[request_id]) < sample_rate
}

/// For a keyed sample of requests, heavy-ranks every ad that passes
/// targeting with `budgets` and logs it. Nothing is served, so budgets are
/// left untouched.
pub fn uas_log(
    world: &World,
    requests: &[Request],
    sample_rate: f64,
    config: &FunnelConfig,
    seed: u64,
    budgets: &[f64],
) -> Result<UasLog> {
    if !(sample_rate > 0.0 && sample_rate <= 1.0) {
        return Err(Error::config("uas_sample_rate", "must lie in (0, 1]"));
    }
    config.validate()?;
    let targeting = TargetingCache::new(world);
    let mut log = Vec::new();
    for req in requests
        .iter()
        .filter(|r| is_uas_sampled(seed, r.request_id, sample_rate))
    {
        let eligible = targeting.eligible(req.user_id, budgets);
        log.extend(uas_records(world, seed, req, &eligible, config)?);
    }
    Ok(log)
}

pub(crate) fn uas_records(
    world: &World,
    seed: u64,
    req: &Request,
    eligible: &[crate::world::AdId],
    config: &FunnelConfig,
) -> Result<Vec<UasRecord>> {
    let w = config.weights();
    heavy_rank(world, seed, req.user_id, eligible, config.noise_sigma)?
        .into_iter()
        .map(|s| {
            let bid = world.ad(s.ad_id)?.bid;
            Ok(UasRecord {
                ts: req.ts,
                request_id: req.request_id,
                user_id: req.user_id,
                ad_id: s.ad_id,
                rankscore: rankscore(bid, s.p_eng, s.p_neg, &w),
                bid,
                p_eng: s.p_eng,
                p_neg: s.p_neg,
            })
        })
        .collect()
}

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{by_score_then_id, ScoredAd};
use crate::error::{Error, Result};
use crate::world::{AdId, Timestamp, UserId, SECONDS_PER_DAY};

/// Default lookback for quality scores: three weeks.
pub const DEFAULT_QUALITY_WINDOW: Timestamp = 21 * 86_400;

/// One fully scored (request, ad) pair from counterfactual logging.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UasRecord {
    pub ts: Timestamp,
    pub request_id: u64,
    pub user_id: UserId,
    pub ad_id: AdId,
    pub rankscore: f64,
    pub bid: f64,
    pub p_eng: f64,
    pub p_neg: f64,
}

pub type UasLog = Vec<UasRecord>;

#[derive(Clone, Debug, PartialEq)]
pub struct QualityScores {
    pub scores: BTreeMap<(UserId, AdId), f64>,
    pub t0: Timestamp,
    pub window: Timestamp,
}

fn check_scale(time_scale_days: f64) -> Result<()> {
    if time_scale_days > 0.0 && time_scale_days.is_finite() {
        Ok(())
    } else {
        Err(Error::config("time_scale_days", "must be positive"))
    }
}

/// `Σ rs·exp((t - t0)/τ) / Σ exp((t - t0)/τ)` with times in days. The ratio
/// does not depend on t0, so exponents are taken relative to the newest
/// record, which keeps every weight in (0, 1].
fn weighted_mean<'a>(records: impl Iterator<Item = &'a (Timestamp, f64)> + Clone, tau: f64) -> f64 {
    let newest = records.clone().map(|r| r.0).max().unwrap_or(0);
    let (num, den) = records.fold((0.0, 0.0), |(n, d), &(t, rs)| {
        let w = (-((newest - t) as f64) / SECONDS_PER_DAY / tau).exp();
        (n + w * rs, d + w)
    });
    num / den
}

/// Time-weighted mean rankscore per (user, ad) over records with
/// `t0 - t <= window`. Later records weigh more, at rate `1/time_scale_days`
/// per day.
pub fn quality_scores(
    log: &[UasRecord],
    t0: Timestamp,
    window: Timestamp,
    time_scale_days: f64,
) -> Result<QualityScores> {
    check_scale(time_scale_days)?;
    if let Some(r) = log.iter().find(|r| r.ts > t0) {
        return Err(Error::Argument(format!(
            "log record at {} is after t0 = {t0}",
            r.ts
        )));
    }
    let mut grouped: BTreeMap<(UserId, AdId), Vec<(Timestamp, f64)>> = BTreeMap::new();
    for r in log.iter().filter(|r| t0 - r.ts <= window) {
        grouped
            .entry((r.user_id, r.ad_id))
            .or_default()
            .push((r.ts, r.rankscore));
    }
    let scores = grouped
        .into_iter()
        .map(|(key, recs)| (key, weighted_mean(recs.iter(), time_scale_days)))
        .collect();
    Ok(QualityScores { scores, t0, window })
}

#[derive(Clone, Debug, Default)]
struct PairState {
    records: VecDeque<(Timestamp, f64)>,
    q: f64,
}

/// Incremental form of [`quality_scores`] for a log that grows in time
/// order. Only pairs that gained or lost records are recomputed.
#[derive(Clone, Debug)]
pub struct QualityTracker {
    window: Timestamp,
    tau: f64,
    pairs: BTreeMap<(UserId, AdId), PairState>,
    arrivals: VecDeque<(Timestamp, UserId, AdId)>,
    dirty: BTreeSet<(UserId, AdId)>,
    latest: Timestamp,
}

impl QualityTracker {
    pub fn new(window: Timestamp, time_scale_days: f64) -> Result<Self> {
        check_scale(time_scale_days)?;
        Ok(QualityTracker {
            window,
            tau: time_scale_days,
            pairs: BTreeMap::new(),
            arrivals: VecDeque::new(),
            dirty: BTreeSet::new(),
            latest: 0,
        })
    }

    /// Appends a record. Records must arrive in non-decreasing time order.
    pub fn push(&mut self, r: &UasRecord) -> Result<()> {
        if r.ts < self.latest {
            return Err(Error::Argument(format!(
                "record at {} arrived after one at {}",
                r.ts, self.latest
            )));
        }
        self.latest = r.ts;
        let key = (r.user_id, r.ad_id);
        self.pairs
            .entry(key)
            .or_default()
            .records
            .push_back((r.ts, r.rankscore));
        self.arrivals.push_back((r.ts, r.user_id, r.ad_id));
        self.dirty.insert(key);
        Ok(())
    }

    /// Brings scores up to `t0`: drops records older than the window and
    /// recomputes affected pairs. Returns the users whose scores changed.
    pub fn advance(&mut self, t0: Timestamp) -> Result<BTreeSet<UserId>> {
        if t0 < self.latest {
            return Err(Error::Argument(format!(
                "t0 = {t0} precedes the newest record at {}",
                self.latest
            )));
        }
        while let Some(&(ts, u, a)) = self.arrivals.front() {
            if t0 - ts <= self.window {
                break;
            }
            self.arrivals.pop_front();
            if let Some(p) = self.pairs.get_mut(&(u, a)) {
                p.records.pop_front();
            }
            self.dirty.insert((u, a));
        }
        let mut touched = BTreeSet::new();
        for key in std::mem::take(&mut self.dirty) {
            touched.insert(key.0);
            let Some(p) = self.pairs.get_mut(&key) else {
                continue;
            };
            if p.records.is_empty() {
                self.pairs.remove(&key);
            } else {
                p.q = weighted_mean(p.records.iter(), self.tau);
            }
        }
        Ok(touched)
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Current scores. Call [`advance`](Self::advance) first.
    pub fn scores(&self) -> BTreeMap<(UserId, AdId), f64> {
        self.pairs.iter().map(|(k, p)| (*k, p.q)).collect()
    }

    /// The user's `k` best ads by current score, ties by ascending id.
    pub fn top_k(&self, user: UserId, k: usize) -> Vec<ScoredAd> {
        let mut list: Vec<ScoredAd> = self
            .pairs
            .range((user, AdId(0))..=(user, AdId(u32::MAX)))
            .map(|((_, ad_id), p)| ScoredAd {
                ad_id: *ad_id,
                score: p.q,
            })
            .collect();
        list.sort_by(by_score_then_id);
        list.truncate(k);
        list
    }
}

//! Evaluation metrics for sourcing and for the ad ecosystem, plus the
//! experiment readout: per-arm values, deltas, bootstrap p-values and their
//! Benjamini–Yekutieli adjustment.

mod report;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funnel::RankWeights;
use crate::world::{AdvertiserId, CampaignId};

pub use report::{
    compare, ArmMetrics, BootstrapParams, MetricDelta, MetricsReport, ObjectiveMetrics,
};

/// Share of engaged items that the candidate sets retrieved, pooled over
/// requests. `None` when no request has an engagement.
pub fn recall<T: Ord>(candidates: &[BTreeSet<T>], engaged: &[BTreeSet<T>]) -> Result<Option<f64>> {
    pooled_hits(candidates, engaged)
}

/// Share of full-auction winner slots whose ad appears in the candidate set.
/// `None` when no request has a winner.
pub fn auction_recall<T: Ord>(
    candidates: &[BTreeSet<T>],
    winners: &[BTreeSet<T>],
) -> Result<Option<f64>> {
    pooled_hits(candidates, winners)
}

fn pooled_hits<T: Ord>(candidates: &[BTreeSet<T>], targets: &[BTreeSet<T>]) -> Result<Option<f64>> {
    if candidates.len() != targets.len() {
        return Err(Error::Argument(format!(
            "{} candidate sets for {} requests",
            candidates.len(),
            targets.len()
        )));
    }
    let (hits, total) = candidates
        .iter()
        .zip(targets)
        .fold((0usize, 0usize), |(h, n), (c, t)| {
            (h + t.iter().filter(|x| c.contains(x)).count(), n + t.len())
        });
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

fn desc(a: &f64, b: &f64) -> Ordering {
    b.partial_cmp(a).unwrap_or(Ordering::Equal)
}

fn top_sum(values: &[f64], m: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(desc);
    v.iter().take(m).sum()
}

/// Whether `sub` is contained in `sup` as a multiset.
fn is_submultiset(sub: &[f64], sup: &[f64]) -> bool {
    let mut a = sub.to_vec();
    let mut b = sup.to_vec();
    a.sort_by(desc);
    b.sort_by(desc);
    let mut j = 0;
    for x in a {
        while j < b.len() && b[j] > x {
            j += 1;
        }
        if j == b.len() || b[j] != x {
            return false;
        }
        j += 1;
    }
    true
}

/// Rankscore normalized cumulative gain: the top-m rankscore mass of the
/// candidate sets over that of the eligible sets, pooled over requests.
/// Zero when the eligible mass is zero.
pub fn rncg(eligible: &[Vec<f64>], candidates: &[Vec<f64>], m: usize) -> Result<f64> {
    if eligible.len() != candidates.len() {
        return Err(Error::Argument(format!(
            "{} candidate sets for {} requests",
            candidates.len(),
            eligible.len()
        )));
    }
    if m == 0 {
        return Err(Error::Argument("m must be at least 1".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, (r, c)) in eligible.iter().zip(candidates).enumerate() {
        if !is_submultiset(c, r) {
            return Err(Error::DataIntegrity(format!(
                "request {i}: candidate rankscores are not a subset of the eligible ones"
            )));
        }
        num += top_sum(c, m);
        den += top_sum(r, m);
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Number of advertisers in the top percentile of `n`.
pub fn top_percentile_size(n: usize) -> usize {
    n.div_ceil(100)
}

/// Share of serving held by the top `ceil(n/100)` advertisers, ranked by
/// count descending then id ascending. Zero when nothing was served.
pub fn t1ps(served_counts: &BTreeMap<AdvertiserId, u64>) -> f64 {
    let total: u64 = served_counts.values().sum();
    if total == 0 {
        return 0.0;
    }
    let mut counts: Vec<(AdvertiserId, u64)> =
        served_counts.iter().map(|(a, c)| (*a, *c)).collect();
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let top: u64 = counts
        .iter()
        .take(top_percentile_size(counts.len()))
        .map(|c| c.1)
        .sum();
    top as f64 / total as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdsValue {
    pub value: f64,
    /// Campaigns with bucket conversions but no reference conversions.
    pub skipped_campaigns: usize,
}

/// Conversions valued at each campaign's average cost per conversion:
/// `Σ_i (revenue_i / conversions_i) · bucket_conversions_i`. Campaigns with
/// zero reference conversions are skipped and counted.
pub fn ads_value(
    campaigns: &BTreeMap<CampaignId, (f64, u64)>,
    bucket_conversions: &BTreeMap<CampaignId, u64>,
) -> AdsValue {
    let mut value = 0.0;
    let mut skipped_campaigns = 0;
    for (c, &n) in bucket_conversions {
        match campaigns.get(c) {
            Some(&(revenue, total)) if total > 0 => value += revenue / total as f64 * n as f64,
            _ if n == 0 => {}
            _ => skipped_campaigns += 1,
        }
    }
    AdsValue {
        value,
        skipped_campaigns,
    }
}

/// Observed rankscore `bid·eng − w_neg·bid·neg` per 1000 impressions. Zero
/// with no impressions.
pub fn utility(impressions: &[(f64, bool, bool)], weights: &RankWeights) -> f64 {
    if impressions.is_empty() {
        return 0.0;
    }
    let total: f64 = impressions
        .iter()
        .map(|&(bid, eng, neg)| observed_value(bid, eng, neg, weights))
        .sum();
    1000.0 * total / impressions.len() as f64
}

pub(crate) fn observed_value(bid: f64, eng: bool, neg: bool, weights: &RankWeights) -> f64 {
    let e = if eng { 1.0 } else { 0.0 };
    let n = if neg { 1.0 } else { 0.0 };
    bid * e - weights.w_neg * bid * n
}

/// Benjamini–Yekutieli step-up adjustment, returned in input order.
pub fn by_adjust(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Argument(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let c: f64 = (1..=m).map(|k| 1.0 / k as f64).sum();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        p_values[a]
            .partial_cmp(&p_values[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0_f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        let a = (p_values[i] * m as f64 * c / (rank + 1) as f64).min(1.0);
        running = running.min(a);
        adjusted[i] = running;
    }
    Ok(adjusted)
}

/// Area under the ROC curve with tied scores counted as half. `None` unless
/// both classes are present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid_rank * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos * n_neg) as f64))
}

/// Share of held-out items found in the first `k` retrieved items of the
/// same user, pooled over users. `None` with no held-out items.
pub fn hit_rate_at_k<T: Eq + Hash>(
    retrieved: &[Vec<T>],
    held_out: &[Vec<T>],
    k: usize,
) -> Result<Option<f64>> {
    if retrieved.len() != held_out.len() {
        return Err(Error::Argument(format!(
            "{} retrieved lists for {} users",
            retrieved.len(),
            held_out.len()
        )));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (r, h) in retrieved.iter().zip(held_out) {
        let top: std::collections::HashSet<&T> = r.iter().take(k).collect();
        hits += h.iter().filter(|x| top.contains(x)).count();
        total += h.len();
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    #[test]
    fn recall_cases() {
        assert_eq!(
            recall(&[set(&[1, 2, 3, 9])], &[set(&[1, 2, 3, 4])]).unwrap(),
            Some(0.75)
        );
        assert_eq!(recall(&[set(&[1])], &[set(&[])]).unwrap(), None);
        assert_eq!(
            auction_recall(&[set(&[])], &[set(&[4, 5])]).unwrap(),
            Some(0.0)
        );
        assert!(recall::<u32>(&[], &[set(&[1])]).is_err());
    }

    #[test]
    fn rncg_cases() {
        let r = vec![vec![5.0, 4.0, 3.0, 2.0, 1.0]];
        assert!((rncg(&r, &[vec![5.0, 3.0, 1.0]], 3).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(rncg(&r, &r, 3).unwrap(), 1.0);
        assert_eq!(rncg(&r, &[vec![]], 3).unwrap(), 0.0);
        assert!(matches!(
            rncg(&r, &[vec![6.0]], 3),
            Err(Error::DataIntegrity(_))
        ));
        assert!(matches!(
            rncg(&[vec![1.0]], &[vec![1.0, 1.0]], 3),
            Err(Error::DataIntegrity(_))
        ));
    }

    #[test]
    fn t1ps_cases() {
        let uniform: BTreeMap<AdvertiserId, u64> = (0..100).map(|i| (AdvertiserId(i), 1)).collect();
        assert!((t1ps(&uniform) - 0.01).abs() < 1e-12);
        let mut heavy = uniform.clone();
        heavy.insert(AdvertiserId(0), 100);
        assert!((t1ps(&heavy) - 100.0 / 199.0).abs() < 1e-12);
        assert_eq!(t1ps(&[(AdvertiserId(3), 7)].into_iter().collect()), 1.0);
        assert_eq!(t1ps(&BTreeMap::new()), 0.0);
    }

    #[test]
    fn ads_value_cases() {
        let campaigns: BTreeMap<CampaignId, (f64, u64)> =
            [(CampaignId(0), (100.0, 10)), (CampaignId(1), (5.0, 0))]
                .into_iter()
                .collect();
        let bucket = [(CampaignId(0), 3)].into_iter().collect();
        assert!((ads_value(&campaigns, &bucket).value - 30.0).abs() < 1e-12);
        assert_eq!(ads_value(&campaigns, &BTreeMap::new()).value, 0.0);
        let skip = [(CampaignId(1), 2)].into_iter().collect();
        assert_eq!(ads_value(&campaigns, &skip).skipped_campaigns, 1);
    }

    #[test]
    fn utility_cases() {
        let w = RankWeights::default();
        let mut imps = vec![(10.0, false, false); 1000];
        assert_eq!(utility(&imps, &w), 0.0);
        imps[0].1 = true;
        assert!((utility(&imps, &w) - 10.0).abs() < 1e-12);
        assert_eq!(utility(&[], &w), 0.0);
    }

    #[test]
    fn by_adjust_cases() {
        let adj = by_adjust(&[0.01, 0.02, 0.04]).unwrap();
        for (a, e) in adj.iter().zip([0.055, 0.055, 11.0 / 150.0]) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        assert_eq!(by_adjust(&[0.3]).unwrap(), vec![0.3]);
        assert_eq!(by_adjust(&[1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        assert!(by_adjust(&[1.5]).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.1, 0.9], &[false, true]).unwrap(), Some(1.0));
        assert_eq!(auc(&[0.5, 0.5], &[false, true]).unwrap(), Some(0.5));
        assert_eq!(auc(&[0.5], &[true]).unwrap(), None);
    }

    #[test]
    fn hit_rate_cases() {
        let r = vec![vec![1, 2, 3], vec![4]];
        let h = vec![vec![3, 7], vec![]];
        assert_eq!(hit_rate_at_k(&r, &h, 3).unwrap(), Some(0.5));
        assert_eq!(hit_rate_at_k(&r, &h, 2).unwrap(), Some(0.0));
    }
}

//! Candidate sourcing strategies and the blender that splices their output
//! into the light ranker's top-K.

mod blend;
mod quality;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::AnnIndex;
use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::world::{AdId, Timestamp, UserId, World};

pub use blend::{blend, BlendConfig, STRATEGY_GRAPH, STRATEGY_GRAPH_DECAYED, STRATEGY_RANKSCORE};
pub use quality::{
    quality_scores, QualityScores, QualityTracker, UasLog, UasRecord, DEFAULT_QUALITY_WINDOW,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredAd {
    pub ad_id: AdId,
    pub score: f64,
}

/// Per-user ranked ad lists produced by one strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct SourcedAds {
    pub strategy: String,
    pub generated_at: Timestamp,
    pub lists: BTreeMap<UserId, Vec<ScoredAd>>,
}

impl SourcedAds {
    pub fn new(strategy: impl Into<String>, generated_at: Timestamp) -> Self {
        SourcedAds {
            strategy: strategy.into(),
            generated_at,
            lists: BTreeMap::new(),
        }
    }

    pub fn ads_for(&self, user: UserId) -> Vec<AdId> {
        self.lists
            .get(&user)
            .map(|l| l.iter().map(|s| s.ad_id).collect())
            .unwrap_or_default()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let lines: Vec<SourcedLine> = self
            .lists
            .iter()
            .map(|(user, ads)| SourcedLine {
                user_id: *user,
                strategy: self.strategy.clone(),
                generated_at: self.generated_at,
                ads: ads.clone(),
            })
            .collect();
        write_jsonl(path, &lines)
    }

    /// Loads a strategy file. An empty file yields an empty set named `fallback_strategy`.
    pub fn load(path: &Path, fallback_strategy: &str) -> Result<Self> {
        let lines: Vec<SourcedLine> = read_jsonl(path)?;
        let mut out = match lines.first() {
            Some(l) => SourcedAds::new(l.strategy.clone(), l.generated_at),
            None => SourcedAds::new(fallback_strategy, 0),
        };
        for l in lines {
            if l.strategy != out.strategy || l.generated_at != out.generated_at {
                return Err(Error::Format(format!(
                    "{} mixes strategies or generation times",
                    path.display()
                )));
            }
            if out.lists.insert(l.user_id, l.ads).is_some() {
                return Err(Error::Format(format!(
                    "{} lists user {} twice",
                    path.display(),
                    l.user_id
                )));
            }
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourcedLine {
    user_id: UserId,
    strategy: String,
    generated_at: Timestamp,
    ads: Vec<ScoredAd>,
}

fn by_score_then_id(a: &ScoredAd, b: &ScoredAd) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.ad_id.cmp(&b.ad_id))
}

/// Per user, the `k_source` ads with highest quality score, ties by ascending ad id.
pub fn topk_rankscore_candidates(q: &QualityScores, k_source: usize) -> Result<SourcedAds> {
    if k_source == 0 {
        return Err(Error::config("k_source", "must be at least 1"));
    }
    let mut out = SourcedAds::new(STRATEGY_RANKSCORE, q.t0);
    for (&(user, ad_id), &score) in &q.scores {
        out.lists
            .entry(user)
            .or_default()
            .push(ScoredAd { ad_id, score });
    }
    for list in out.lists.values_mut() {
        list.sort_by(by_score_then_id);
        list.truncate(k_source);
    }
    Ok(out)
}

/// Per user with a query vector, the top `k_source` eligible ads by inner
/// product. Users without a query are absent from the output.
pub fn graph_candidates<F>(
    strategy: &str,
    queries: &BTreeMap<UserId, Vec<f64>>,
    ad_index: &AnnIndex,
    k_source: usize,
    eligibility: F,
    generated_at: Timestamp,
) -> Result<SourcedAds>
where
    F: Fn(UserId, AdId) -> bool + Sync,
{
    if k_source == 0 {
        return Err(Error::config("k_source", "must be at least 1"));
    }
    let lists = queries
        .par_iter()
        .map(|(&user, q)| {
            let filter = |id: u64| eligibility(user, AdId(id as u32));
            let hits = ad_index.query(q, k_source, Some(&filter))?;
            let list = hits
                .into_iter()
                .map(|n| ScoredAd {
                    ad_id: AdId(n.id as u32),
                    score: n.score,
                })
                .collect();
            Ok((user, list))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(SourcedAds {
        strategy: strategy.to_string(),
        generated_at,
        lists,
    })
}

/// Drops ads whose budget is exhausted or whose hard targeting excludes the
/// user, preserving order. Unknown ad ids are dropped as well.
pub fn serving_filter(cands: &[AdId], world: &World, user: UserId, budgets: &[f64]) -> Vec<AdId> {
    let Ok(u) = world.user(user) else {
        return Vec::new();
    };
    cands
        .iter()
        .copied()
        .filter(|a| {
            world.ads.get(a.index()).is_some_and(|ad| {
                budgets.get(a.index()).is_some_and(|&b| b > 0.0) && ad.hard_targeting.matches(u)
            })
        })
        .collect()
}

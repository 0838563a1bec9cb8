use std::collections::HashSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::AdId;

pub const STRATEGY_RANKSCORE: &str = "rankscore";
pub const STRATEGY_GRAPH: &str = "graph";
pub const STRATEGY_GRAPH_DECAYED: &str = "graph_decayed";

const TAIL_KEY: &str = "tail_fraction";
const SLACK: f64 = 1e-9;

/// Strategy fractions of K in declaration order, plus the tail fraction M.
///
/// Serialized as a flat object, e.g. `{"rankscore": 0.2, "graph": 0.2,
/// "tail_fraction": 0.4}`. A missing `tail_fraction` defaults to the sum of
/// the strategy fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IndexMap<String, f64>", into = "IndexMap<String, f64>")]
pub struct BlendConfig {
    strategies: IndexMap<String, f64>,
    tail_fraction: f64,
}

impl BlendConfig {
    pub fn new(
        strategies: impl IntoIterator<Item = (String, f64)>,
        tail_fraction: f64,
    ) -> Result<Self> {
        let cfg = BlendConfig {
            strategies: strategies.into_iter().collect(),
            tail_fraction,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Light ranker only.
    pub fn control() -> Self {
        BlendConfig {
            strategies: IndexMap::new(),
            tail_fraction: 0.0,
        }
    }

    /// A single strategy taking the whole tail.
    pub fn single(strategy: &str, fraction: f64) -> Result<Self> {
        Self::new([(strategy.to_string(), fraction)], fraction)
    }

    pub fn strategies(&self) -> &IndexMap<String, f64> {
        &self.strategies
    }

    pub fn tail_fraction(&self) -> f64 {
        self.tail_fraction
    }

    pub fn is_control(&self) -> bool {
        self.strategies.values().all(|&f| f == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(self.tail_fraction) {
            return Err(Error::config(TAIL_KEY, "must lie in [0, 1]"));
        }
        for (name, &f) in &self.strategies {
            if name == TAIL_KEY {
                return Err(Error::config(
                    TAIL_KEY,
                    "is reserved and cannot name a strategy",
                ));
            }
            if !in_unit(f) {
                return Err(Error::config(name.clone(), "fraction must lie in [0, 1]"));
            }
        }
        let total: f64 = self.strategies.values().sum();
        if total > self.tail_fraction + SLACK {
            return Err(Error::config(
                TAIL_KEY,
                format!(
                    "strategy fractions sum to {total}, above the tail fraction {}",
                    self.tail_fraction
                ),
            ));
        }
        Ok(())
    }

    /// Number of light-ranker positions kept untouched out of `k`.
    pub fn head_len(&self, k: usize) -> usize {
        k - floor_share(k, self.tail_fraction)
    }
}

fn floor_share(k: usize, fraction: f64) -> usize {
    ((k as f64 * fraction + SLACK).floor() as usize).min(k)
}

impl TryFrom<IndexMap<String, f64>> for BlendConfig {
    type Error = Error;

    fn try_from(mut map: IndexMap<String, f64>) -> Result<Self> {
        let tail = map.shift_remove(TAIL_KEY);
        let tail_fraction = tail.unwrap_or_else(|| map.values().sum());
        BlendConfig::new(map, tail_fraction)
    }
}

impl From<BlendConfig> for IndexMap<String, f64> {
    fn from(cfg: BlendConfig) -> Self {
        let mut map = cfg.strategies;
        map.insert(TAIL_KEY.to_string(), cfg.tail_fraction);
        map
    }
}

/// Tail replacement. Keeps the head of `light_topk`, gives each strategy in
/// declared order up to `floor(K·fraction)` of its top ads not already
/// present, then backfills from the displaced light-ranker tail in order.
/// Strategies absent from `sources` contribute nothing.
pub fn blend(
    light_topk: &[AdId],
    sources: &IndexMap<String, Vec<AdId>>,
    config: &BlendConfig,
) -> Result<Vec<AdId>> {
    config.validate()?;
    let k = light_topk.len();
    let head = config.head_len(k);
    let mut out: Vec<AdId> = Vec::with_capacity(k);
    let mut present: HashSet<AdId> = HashSet::with_capacity(k);
    for &a in &light_topk[..head] {
        if present.insert(a) {
            out.push(a);
        }
    }
    for (name, &fraction) in config.strategies() {
        let budget = floor_share(k, fraction);
        let Some(list) = sources.get(name) else {
            continue;
        };
        let mut taken = 0;
        for &a in list {
            if taken == budget || out.len() == k {
                break;
            }
            if present.insert(a) {
                out.push(a);
                taken += 1;
            }
        }
    }
    for &a in &light_topk[head..] {
        if out.len() == k {
            break;
        }
        if present.insert(a) {
            out.push(a);
        }
    }
    Ok(out)
}

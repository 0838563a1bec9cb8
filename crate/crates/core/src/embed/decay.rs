use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::EmbeddingModel;
use crate::error::{Error, Result};
use crate::graph::Vertex;
use crate::rng::{self, tags};
use crate::world::{Timestamp, UserId, World, SECONDS_PER_DAY};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayParams {
    /// Decay rate per day.
    pub lambda: f64,
    pub last_n: usize,
}

impl Default for DecayParams {
    fn default() -> Self {
        DecayParams {
            lambda: std::f64::consts::LN_2 / 7.0,
            last_n: 50,
        }
    }
}

impl DecayParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be positive"));
        }
        if self.last_n == 0 {
            return Err(Error::config("last_n", "must be at least 1"));
        }
        Ok(())
    }
}

/// Exponentially time-weighted mean of the most recent `last_n` engaged ad
/// vectors. Weights are `exp(lambda * (t_j - t0))` with times in days.
/// Returns `None` for an empty history.
pub fn decay_user_embedding(
    engagements: &[(&[f64], Timestamp)],
    t0: Timestamp,
    params: &DecayParams,
) -> Result<Option<Vec<f64>>> {
    params.validate()?;
    if let Some(&(_, t)) = engagements.iter().find(|(_, t)| *t > t0) {
        return Err(Error::Argument(format!(
            "engagement at {t} is after t0 = {t0}"
        )));
    }
    let Some(dim) = engagements.first().map(|(v, _)| v.len()) else {
        return Ok(None);
    };
    if engagements.iter().any(|(v, _)| v.len() != dim) {
        return Err(Error::Argument("engaged ad vectors differ in dim".into()));
    }
    let mut recent: Vec<&(&[f64], Timestamp)> = engagements.iter().collect();
    recent.sort_by_key(|r| std::cmp::Reverse(r.1));
    recent.truncate(params.last_n);

    let mut acc = vec![0.0; dim];
    let mut total = 0.0;
    for (v, t) in recent {
        let w = (params.lambda * (*t as f64 - t0 as f64) / SECONDS_PER_DAY).exp();
        total += w;
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += w * x;
        }
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Ok(Some(acc))
}

pub type FollowGraph = BTreeMap<UserId, Vec<UserId>>;

/// Follow lists of every user in the world.
pub fn follow_graph(world: &World) -> FollowGraph {
    world
        .users
        .iter()
        .map(|u| (u.id, u.followings.clone()))
        .collect()
}

fn follower_rng(seed: u64, user: UserId) -> rand_chacha::ChaCha8Rng {
    rng::stream(rng::mix(seed, &[user.0 as u64]), tags::PROPAGATE)
}

/// One-hop feature propagation: each user absent from `table` receives the
/// mean vector of up to `sample_cap` of its embedded followings, sampled
/// uniformly without replacement. Users with no embedded followings stay
/// absent and existing vectors are never touched.
pub fn propagate_embeddings(
    follow_graph: &FollowGraph,
    table: &EmbeddingModel,
    sample_cap: usize,
    seed: u64,
) -> Result<EmbeddingModel> {
    if sample_cap == 0 {
        return Err(Error::config("sample_cap", "must be at least 1"));
    }
    let mut out = table.clone();
    for (&user, followings) in follow_graph {
        if table.contains(&Vertex::user(user.0)) {
            continue;
        }
        let embedded: Vec<&[f64]> = followings
            .iter()
            .filter_map(|f| table.vector(&Vertex::user(f.0)))
            .collect();
        if embedded.is_empty() {
            continue;
        }
        let chosen: Vec<&[f64]> = if embedded.len() > sample_cap {
            let mut rng = follower_rng(seed, user);
            index::sample(&mut rng, embedded.len(), sample_cap)
                .into_iter()
                .map(|i| embedded[i])
                .collect()
        } else {
            embedded
        };
        let mut mean = vec![0.0; table.dim()];
        for v in &chosen {
            for (m, x) in mean.iter_mut().zip(v.iter()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= chosen.len() as f64);
        out.set_vector(Vertex::user(user.0), &mean)?;
    }
    Ok(out)
}

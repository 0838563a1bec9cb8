use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, keyed_normal, tags};
use crate::world::{sigmoid, Ad, AdId, EventRecord, EventType, User, UserId, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LightRankerParams {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub reg: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for LightRankerParams {
    fn default() -> Self {
        LightRankerParams {
            dim: 16,
            epochs: 5,
            learning_rate: 0.02,
            reg: 1e-3,
            init_std: 0.1,
            seed: 17,
        }
    }
}

impl LightRankerParams {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.reg >= 0.0 && self.reg.is_finite()) {
            return Err(Error::config("reg", "must be non-negative"));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("init_std", "must be non-negative"));
        }
        Ok(())
    }
}

/// Two-tower pClick model with its towers evaluated for every user and ad
/// of the world it was trained on: `pClick(u, a) = σ(user(u)·ad(a))`. The
/// last coordinate carries the ad-side bias against a constant 1 on the
/// user side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightRanker {
    dim: usize,
    user_tower: Vec<f64>,
    ad_tower: Vec<f64>,
}

impl LightRanker {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_users(&self) -> usize {
        self.user_tower.len() / self.dim
    }

    pub fn n_ads(&self) -> usize {
        self.ad_tower.len() / self.dim
    }

    fn user(&self, u: UserId) -> Result<&[f64]> {
        self.user_tower
            .get(u.index() * self.dim..(u.index() + 1) * self.dim)
            .ok_or(Error::Lookup {
                kind: "user",
                id: u.0 as u64,
            })
    }

    fn ad(&self, a: AdId) -> Result<&[f64]> {
        self.ad_tower
            .get(a.index() * self.dim..(a.index() + 1) * self.dim)
            .ok_or(Error::Lookup {
                kind: "ad",
                id: a.0 as u64,
            })
    }

    fn logit(&self, u: &[f64], ad: AdId) -> Result<f64> {
        Ok(dot(u, self.ad(ad)?))
    }

    pub fn p_click(&self, user: UserId, ad: AdId) -> Result<f64> {
        Ok(sigmoid(self.logit(self.user(user)?, ad)?))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sparse binary feature indices per entity.
fn user_features(world: &World, u: &User) -> Vec<usize> {
    let c = &world.config;
    let mut f = vec![
        u.geo as usize,
        c.n_geos + u.language as usize,
        c.n_geos + c.n_languages + u.age_band as usize,
    ];
    let base = c.n_geos + c.n_languages + c.n_age_bands;
    f.extend(u.topics.iter().map(|&t| base + t as usize));
    f
}

fn user_feature_count(world: &World) -> usize {
    let c = &world.config;
    c.n_geos + c.n_languages + c.n_age_bands + c.n_topics
}

fn ad_features(world: &World, a: &Ad) -> Vec<usize> {
    let c = &world.config;
    let mut f = vec![
        (a.objective as usize).saturating_sub(1),
        c.objective_count + a.advertiser_id.index(),
    ];
    let mut base = c.objective_count + c.n_advertisers;
    f.extend(
        a.soft_targeting
            .topic_set
            .iter()
            .map(|&t| base + t as usize),
    );
    base += c.n_topics;
    f.extend(a.hard_targeting.geo_set.iter().map(|&g| base + g as usize));
    base += c.n_geos;
    f.extend(
        a.hard_targeting
            .language_set
            .iter()
            .map(|&l| base + l as usize),
    );
    f
}

fn ad_feature_count(world: &World) -> usize {
    let c = &world.config;
    c.objective_count + c.n_advertisers + c.n_topics + c.n_geos + c.n_languages
}

/// Trainable parameters: per-feature columns and per-id embeddings, each
/// `dim` wide, plus scalar ad-side biases per feature and per id.
struct Weights {
    dim: usize,
    user_cols: Vec<f64>,
    ad_cols: Vec<f64>,
    user_ids: Vec<f64>,
    ad_ids: Vec<f64>,
    ad_feature_bias: Vec<f64>,
    ad_id_bias: Vec<f64>,
    bias: f64,
}

impl Weights {
    fn init(world: &World, p: &LightRankerParams) -> Self {
        let draw = |block: u64, n: usize| -> Vec<f64> {
            (0..n * p.dim)
                .map(|i| p.init_std * keyed_normal(p.seed ^ tags::LIGHT_RANKER, &[block, i as u64]))
                .collect()
        };
        Weights {
            dim: p.dim,
            user_cols: draw(0, user_feature_count(world)),
            ad_cols: draw(1, ad_feature_count(world)),
            user_ids: draw(2, world.users.len()),
            ad_ids: draw(3, world.ads.len()),
            ad_feature_bias: vec![0.0; ad_feature_count(world)],
            ad_id_bias: vec![0.0; world.ads.len()],
            bias: 0.0,
        }
    }

    fn ad_bias(&self, feats: &[usize], id: usize) -> f64 {
        self.ad_id_bias[id] + feats.iter().map(|&f| self.ad_feature_bias[f]).sum::<f64>()
    }

    fn tower(&self, cols: &[f64], ids: &[f64], feats: &[usize], id: usize) -> Vec<f64> {
        let d = self.dim;
        let mut v = ids[id * d..(id + 1) * d].to_vec();
        for &f in feats {
            v.iter_mut()
                .zip(&cols[f * d..(f + 1) * d])
                .for_each(|(x, c)| *x += c);
        }
        v
    }

    fn materialize(&self, world: &World) -> LightRanker {
        let user_tower = world
            .users
            .iter()
            .flat_map(|u| {
                let mut v = self.tower(
                    &self.user_cols,
                    &self.user_ids,
                    &user_features(world, u),
                    u.id.index(),
                );
                v.push(1.0);
                v
            })
            .collect();
        let ad_tower = world
            .ads
            .iter()
            .flat_map(|a| {
                let feats = ad_features(world, a);
                let mut v = self.tower(&self.ad_cols, &self.ad_ids, &feats, a.id.index());
                v.push(self.ad_bias(&feats, a.id.index()) + self.bias);
                v
            })
            .collect();
        LightRanker {
            dim: self.dim + 1,
            user_tower,
            ad_tower,
        }
    }
}

fn sgd_step(block: &mut [f64], grad: &[f64], scale: f64, lr: f64, reg: f64) {
    for (w, g) in block.iter_mut().zip(grad) {
        *w -= lr * (scale * g + reg * *w);
    }
}

/// Logistic regression of "positively engaged" on impressions from `log`.
/// An impression is positive when the log holds a positive engagement with
/// the same `(ts, user, ad)`.
pub fn train_light_ranker(
    log: &[EventRecord],
    world: &World,
    params: &LightRankerParams,
) -> Result<LightRanker> {
    params.validate()?;
    let engaged: HashSet<(u64, UserId, AdId)> = log
        .iter()
        .filter(|e| e.event == EventType::PositiveEngagement)
        .map(|e| (e.ts, e.user_id, e.ad_id))
        .collect();
    let mut examples: Vec<(UserId, AdId, f64)> = Vec::new();
    for e in log.iter().filter(|e| e.event == EventType::Impression) {
        world.user(e.user_id)?;
        world.ad(e.ad_id)?;
        let y = if engaged.contains(&(e.ts, e.user_id, e.ad_id)) {
            1.0
        } else {
            0.0
        };
        examples.push((e.user_id, e.ad_id, y));
    }
    let positives = examples.iter().filter(|x| x.2 == 1.0).count();
    if positives == 0 || positives == examples.len() {
        return Err(Error::Training(format!(
            "light ranker needs both classes; {positives} positives in {} impressions",
            examples.len()
        )));
    }

    let mut w = Weights::init(world, params);
    let base_rate = positives as f64 / examples.len() as f64;
    if params.epochs == 0 {
        return Ok(w.materialize(world));
    }
    w.bias = (base_rate / (1.0 - base_rate)).ln();

    let ufeats: Vec<Vec<usize>> = world
        .users
        .iter()
        .map(|u| user_features(world, u))
        .collect();
    let afeats: Vec<Vec<usize>> = world.ads.iter().map(|a| ad_features(world, a)).collect();
    let d = params.dim;
    let (lr, reg) = (params.learning_rate, params.reg);
    let mut rng = rng::stream(params.seed, tags::LIGHT_RANKER);
    for _ in 0..params.epochs {
        examples.shuffle(&mut rng);
        for &(u, a, y) in &examples {
            let uf = &ufeats[u.index()];
            let af = &afeats[a.index()];
            let uv = w.tower(&w.user_cols, &w.user_ids, uf, u.index());
            let av = w.tower(&w.ad_cols, &w.ad_ids, af, a.index());
            let g = sigmoid(dot(&uv, &av) + w.ad_bias(af, a.index()) + w.bias) - y;
            w.bias -= lr * g;
            w.ad_id_bias[a.index()] -= lr * (g + reg * w.ad_id_bias[a.index()]);
            for &f in af {
                w.ad_feature_bias[f] -= lr * (g + reg * w.ad_feature_bias[f]);
            }
            sgd_step(
                &mut w.user_ids[u.index() * d..(u.index() + 1) * d],
                &av,
                g,
                lr,
                reg,
            );
            for &f in uf {
                sgd_step(&mut w.user_cols[f * d..(f + 1) * d], &av, g, lr, reg);
            }
            sgd_step(
                &mut w.ad_ids[a.index() * d..(a.index() + 1) * d],
                &uv,
                g,
                lr,
                reg,
            );
            for &f in af {
                sgd_step(&mut w.ad_cols[f * d..(f + 1) * d], &uv, g, lr, reg);
            }
        }
    }
    Ok(w.materialize(world))
}

/// Top `k` of `eligible` by `pClick × bid`, ties by ascending ad id.
pub fn light_rank(
    ranker: &LightRanker,
    world: &World,
    user: UserId,
    eligible: &[AdId],
    k: usize,
) -> Result<Vec<AdId>> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let uv = ranker.user(user)?;
    let mut scored = eligible
        .iter()
        .map(|&a| Ok((sigmoid(ranker.logit(uv, a)?) * world.ad(a)?.bid, a)))
        .collect::<Result<Vec<(f64, AdId)>>>()?;
    let order = |x: &(f64, AdId), y: &(f64, AdId)| {
        y.0.partial_cmp(&x.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.1.cmp(&y.1))
    };
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    Ok(scored.into_iter().map(|(_, a)| a).collect())
}

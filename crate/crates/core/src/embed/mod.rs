//! Translation embeddings over the engagement graph.
//!
//! An edge `(h, r, t)` scores `(v_h + v_r) · v_t`. Training minimises a
//! softmax cross-entropy of each positive tail against batch and uniform
//! negatives. Tic updates fit only new vertices; toc updates relax everything.

mod decay;
mod format;
mod train;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EntityType, Relation, Vertex};
use crate::rng::{keyed_normal, tags};
use crate::world::{dot, UserId};

pub use decay::{
    decay_user_embedding, follow_graph, propagate_embeddings, DecayParams, FollowGraph,
};
pub use format::{EMBEDDING_FORMAT_VERSION, EMBEDDING_MAGIC};
pub use train::{
    loss_and_grad, mean_loss, tic_update, toc_update, train, train_reporting, Gradient, TrainReport,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adagrad,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub dim: usize,
    pub reg: f64,
    pub negatives_batch: usize,
    pub negatives_uniform: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once the relative change in epoch loss falls below this.
    pub tol: f64,
    pub optimizer: Optimizer,
    pub init_std: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            dim: 64,
            reg: 1e-3,
            negatives_batch: 1000,
            negatives_uniform: 1000,
            epochs: 20,
            learning_rate: 0.1,
            batch_size: 512,
            seed: 7,
            tol: 1e-4,
            optimizer: Optimizer::Adagrad,
            init_std: 0.1,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::config("dim", "must be at least 2"));
        }
        if !(self.reg >= 0.0 && self.reg.is_finite()) {
            return Err(Error::config("reg", "must be finite and non-negative"));
        }
        if self.negatives_batch == 0 {
            return Err(Error::config("negatives_batch", "must be at least 1"));
        }
        if self.negatives_uniform == 0 {
            return Err(Error::config("negatives_uniform", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::config("tol", "must be non-negative"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("init_std", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub toc_epoch: u32,
    pub tic_step: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel {
    dim: usize,
    rows: BTreeMap<Vertex, usize>,
    data: Vec<f64>,
    relations: BTreeMap<Relation, Vec<f64>>,
    pub frozen: BTreeSet<Vertex>,
    pub version: ModelVersion,
}

fn lookup_error(v: &Vertex) -> Error {
    let kind = match v.entity_type {
        EntityType::User => "user embedding",
        EntityType::Ad => "ad embedding",
        EntityType::Advertiser => "advertiser embedding",
    };
    Error::Lookup { kind, id: v.id }
}

impl EmbeddingModel {
    pub fn new(dim: usize) -> Self {
        EmbeddingModel {
            dim,
            rows: BTreeMap::new(),
            data: Vec::new(),
            relations: BTreeMap::new(),
            frozen: BTreeSet::new(),
            version: ModelVersion::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn contains(&self, v: &Vertex) -> bool {
        self.rows.contains_key(v)
    }

    pub fn vector(&self, v: &Vertex) -> Option<&[f64]> {
        self.rows.get(v).map(|&r| self.row(r))
    }

    pub fn relation(&self, r: Relation) -> Option<&[f64]> {
        self.relations.get(&r).map(Vec::as_slice)
    }

    /// Entities in key order.
    pub fn entities(&self) -> impl Iterator<Item = (&Vertex, &[f64])> {
        self.rows.iter().map(|(k, &r)| (k, self.row(r)))
    }

    pub fn relations(&self) -> impl Iterator<Item = (&Relation, &[f64])> {
        self.relations.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn entities_of(&self, kind: EntityType) -> impl Iterator<Item = (&Vertex, &[f64])> {
        self.entities().filter(move |(k, _)| k.entity_type == kind)
    }

    /// Inserts or overwrites an entity vector.
    pub fn set_vector(&mut self, v: Vertex, values: &[f64]) -> Result<()> {
        self.check_dim(values)?;
        match self.rows.get(&v) {
            Some(&r) => self.data[r * self.dim..(r + 1) * self.dim].copy_from_slice(values),
            None => {
                self.rows.insert(v, self.rows.len());
                self.data.extend_from_slice(values);
            }
        }
        Ok(())
    }

    pub fn set_relation(&mut self, r: Relation, values: &[f64]) -> Result<()> {
        self.check_dim(values)?;
        self.relations.insert(r, values.to_vec());
        Ok(())
    }

    fn check_dim(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::Argument(format!(
                "vector of dim {} in a dim-{} model",
                values.len(),
                self.dim
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Argument("non-finite embedding value".into()));
        }
        Ok(())
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    /// `(v_head + v_relation) · v_tail`.
    pub fn score_edge(&self, head: &Vertex, relation: Relation, tail: &Vertex) -> Result<f64> {
        let h = self.vector(head).ok_or_else(|| lookup_error(head))?;
        let t = self.vector(tail).ok_or_else(|| lookup_error(tail))?;
        let r = self.relation(relation).ok_or(Error::Lookup {
            kind: "relation",
            id: relation.code() as u64,
        })?;
        Ok(h.iter().zip(r).zip(t).map(|((h, r), t)| (h + r) * t).sum())
    }

    /// Retrieval query for a user: `v_user + v_engaged_pos`, scored against
    /// ad vectors by inner product.
    pub fn user_query(&self, user: UserId) -> Option<Vec<f64>> {
        let u = self.vector(&Vertex::user(user.0))?;
        let r = self.relation(Relation::EngagedPos)?;
        Some(u.iter().zip(r).map(|(a, b)| a + b).collect())
    }

    /// Query built from an arbitrary user-side vector, such as a decayed one.
    pub fn query_from(&self, user_vector: &[f64]) -> Option<Vec<f64>> {
        let r = self.relation(Relation::EngagedPos)?;
        Some(user_vector.iter().zip(r).map(|(a, b)| a + b).collect())
    }

    pub fn mean_norm(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.entities().map(|(_, v)| dot(v, v).sqrt()).sum::<f64>() / self.rows.len() as f64
    }

    /// Adds any of `vertices` not yet present, at their seeded initial value.
    pub(crate) fn ensure_entities<'a>(
        &mut self,
        vertices: impl IntoIterator<Item = &'a Vertex>,
        seed: u64,
        std: f64,
    ) {
        for v in vertices {
            if !self.rows.contains_key(v) {
                let init = initial_vector(seed, v, self.dim, std);
                self.rows.insert(*v, self.rows.len());
                self.data.extend_from_slice(&init);
            }
        }
    }

    pub(crate) fn ensure_relations(
        &mut self,
        relations: impl IntoIterator<Item = Relation>,
        seed: u64,
        std: f64,
    ) {
        for r in relations {
            let dim = self.dim;
            self.relations
                .entry(r)
                .or_insert_with(|| initial_relation(seed, r, dim, std));
        }
    }
}

/// Seeded initial value of an entity vector; depends only on
/// `(seed, vertex, dim, std)`.
pub fn initial_vector(seed: u64, v: &Vertex, dim: usize, std: f64) -> Vec<f64> {
    (0..dim as u64)
        .map(|k| {
            std * keyed_normal(
                seed ^ tags::TIC_INIT,
                &[v.entity_type.code() as u64, v.id, k],
            )
        })
        .collect()
}

fn initial_relation(seed: u64, r: Relation, dim: usize, std: f64) -> Vec<f64> {
    (0..dim as u64)
        .map(|k| std * keyed_normal(seed ^ tags::TIC_INIT, &[u64::MAX, r.code() as u64, k]))
        .collect()
}

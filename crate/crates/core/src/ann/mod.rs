//! Maximum-inner-product retrieval: an exhaustive index that doubles as the
//! correctness oracle, and an HNSW graph index.

mod format;
mod hnsw;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{ANN_FORMAT_VERSION, ANN_MAGIC};
use hnsw::HnswGraph;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    InnerProduct,
}

impl Metric {
    pub fn code(self) -> u32 {
        match self {
            Metric::InnerProduct => 0,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        (code == 0).then_some(Metric::InnerProduct)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HnswParams {
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub metric: Metric,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 16,
            ef_construction: 200,
            ef_search: 100,
            metric: Metric::InnerProduct,
        }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::config("m", "must be at least 2"));
        }
        if self.ef_construction == 0 {
            return Err(Error::config("ef_construction", "must be at least 1"));
        }
        if self.ef_search == 0 {
            return Err(Error::config("ef_search", "must be at least 1"));
        }
        Ok(())
    }
}

/// Filtered HNSW queries widen the search beam by this factor before filtering.
pub const FILTER_OVERFETCH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Structure {
    Exact,
    Hnsw(HnswGraph),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnIndex {
    ids: Vec<u64>,
    dim: usize,
    vectors: Vec<f64>,
    params: HnswParams,
    structure: Structure,
}

pub(crate) fn ip(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orders by score descending, then id ascending.
pub(crate) fn rank_order(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.id.cmp(&b.id))
}

fn flatten(items: &[(u64, Vec<f64>)]) -> Result<(Vec<u64>, usize, Vec<f64>)> {
    let Some(dim) = items.first().map(|(_, v)| v.len()) else {
        return Err(Error::Argument("cannot index an empty item list".into()));
    };
    if dim == 0 {
        return Err(Error::Argument(
            "vectors must have at least one dimension".into(),
        ));
    }
    let mut seen = HashSet::with_capacity(items.len());
    let mut ids = Vec::with_capacity(items.len());
    let mut vectors = Vec::with_capacity(items.len() * dim);
    for (id, v) in items {
        if v.len() != dim {
            return Err(Error::Argument(format!(
                "item {id} has dim {} but the index has dim {dim}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Argument(format!(
                "item {id} has a non-finite component"
            )));
        }
        if !seen.insert(*id) {
            return Err(Error::Argument(format!("duplicate item id {id}")));
        }
        ids.push(*id);
        vectors.extend_from_slice(v);
    }
    Ok((ids, dim, vectors))
}

/// Exhaustive index; queries scan every item.
pub fn build_exact(items: &[(u64, Vec<f64>)]) -> Result<AnnIndex> {
    let (ids, dim, vectors) = flatten(items)?;
    Ok(AnnIndex {
        ids,
        dim,
        vectors,
        params: HnswParams::default(),
        structure: Structure::Exact,
    })
}

/// HNSW index built by inserting items in the given order.
pub fn build_hnsw(items: &[(u64, Vec<f64>)], params: &HnswParams, seed: u64) -> Result<AnnIndex> {
    params.validate()?;
    let (ids, dim, vectors) = flatten(items)?;
    let graph = HnswGraph::build(&vectors, dim, params, seed);
    Ok(AnnIndex {
        ids,
        dim,
        vectors,
        params: params.clone(),
        structure: Structure::Hnsw(graph),
    })
}

impl AnnIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.structure, Structure::Exact)
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn set_ef_search(&mut self, ef: usize) -> Result<()> {
        if ef == 0 {
            return Err(Error::config("ef_search", "must be at least 1"));
        }
        self.params.ef_search = ef;
        Ok(())
    }

    pub(crate) fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Top `k` items by inner product with `q` among those passing `filter`,
    /// ordered by score descending then id ascending.
    pub fn query(
        &self,
        q: &[f64],
        k: usize,
        filter: Option<&dyn Fn(u64) -> bool>,
    ) -> Result<Vec<Neighbor>> {
        if q.len() != self.dim {
            return Err(Error::Argument(format!(
                "query has dim {} but the index has dim {}",
                q.len(),
                self.dim
            )));
        }
        if k == 0 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        let pass = |id: u64| filter.is_none_or(|f| f(id));
        let mut out: Vec<Neighbor> = match &self.structure {
            Structure::Exact => self
                .ids
                .iter()
                .enumerate()
                .filter(|(_, &id)| pass(id))
                .map(|(i, &id)| Neighbor {
                    id,
                    score: ip(q, self.vector(i)),
                })
                .collect(),
            Structure::Hnsw(graph) => {
                let mut ef = self.params.ef_search.max(k);
                if filter.is_some() {
                    ef *= FILTER_OVERFETCH;
                }
                graph
                    .search(self, q, ef)
                    .into_iter()
                    .filter(|n| pass(self.ids[n.0]))
                    .map(|(i, score)| Neighbor {
                        id: self.ids[i],
                        score,
                    })
                    .collect()
            }
        };
        if out.len() > k {
            out.select_nth_unstable_by(k - 1, rank_order);
            out.truncate(k);
        }
        out.sort_by(rank_order);
        Ok(out)
    }
}

/// Mean over queries of `|approx[..k] ∩ exact[..k]| / k`. Pairs lists by
/// position; a missing counterpart counts as an empty list.
pub fn recall_at_k(approx: &[Vec<u64>], exact: &[Vec<u64>], k: usize) -> f64 {
    let n = approx.len().max(exact.len());
    if n == 0 || k == 0 {
        return 0.0;
    }
    let empty = Vec::new();
    let total: f64 = (0..n)
        .map(|i| {
            let a = approx.get(i).unwrap_or(&empty);
            let e: HashSet<u64> = exact
                .get(i)
                .unwrap_or(&empty)
                .iter()
                .take(k)
                .copied()
                .collect();
            a.iter().take(k).filter(|id| e.contains(id)).count() as f64 / k as f64
        })
        .sum();
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_item_is_always_nearest() {
        let idx = build_exact(&[(7, vec![0.5, -1.0])]).unwrap();
        let r = idx.query(&[-3.0, 2.0], 1, None).unwrap();
        assert_eq!(r[0].id, 7);
    }

    #[test]
    fn duplicate_vectors_rank_by_id() {
        let idx = build_exact(&[
            (9, vec![1.0, 1.0]),
            (2, vec![1.0, 1.0]),
            (5, vec![0.0, 1.0]),
        ])
        .unwrap();
        let r = idx.query(&[1.0, 0.0], 3, None).unwrap();
        assert_eq!(r.iter().map(|n| n.id).collect::<Vec<_>>(), vec![2, 9, 5]);
    }

    #[test]
    fn dimension_and_id_errors() {
        assert!(build_exact(&[]).is_err());
        assert!(build_exact(&[(1, vec![1.0]), (2, vec![1.0, 2.0])]).is_err());
        assert!(build_exact(&[(1, vec![1.0]), (1, vec![2.0])]).is_err());
        let idx = build_exact(&[(1, vec![1.0, 0.0])]).unwrap();
        assert!(idx.query(&[1.0], 1, None).is_err());
    }

    #[test]
    fn filter_rejecting_all_gives_nothing() {
        let idx = build_exact(&[(1, vec![1.0]), (2, vec![2.0])]).unwrap();
        let none = |_: u64| false;
        assert!(idx.query(&[1.0], 2, Some(&none)).unwrap().is_empty());
    }

    #[test]
    fn k_beyond_corpus_returns_everything_sorted() {
        let idx = build_exact(&[(1, vec![1.0]), (2, vec![3.0]), (3, vec![2.0])]).unwrap();
        let r = idx.query(&[1.0], 10, None).unwrap();
        assert_eq!(r.iter().map(|n| n.id).collect::<Vec<_>>(), vec![2, 3, 1]);
    }

    #[test]
    fn recall_hand_cases() {
        let a = vec![vec![1, 2, 3, 4]];
        assert_eq!(recall_at_k(&a, &a, 4), 1.0);
        assert_eq!(recall_at_k(&a, &[vec![5, 6, 7, 8]], 4), 0.0);
        assert_eq!(recall_at_k(&a, &[vec![1, 2, 7, 8]], 4), 0.5);
    }

    #[test]
    fn small_hnsw_is_exhaustive() {
        let items: Vec<(u64, Vec<f64>)> = (0..12u64)
            .map(|i| {
                (
                    i,
                    vec![(i as f64).sin(), (i as f64 * 0.7).cos(), i as f64 / 12.0],
                )
            })
            .collect();
        let exact = build_exact(&items).unwrap();
        let hnsw = build_hnsw(&items, &HnswParams::default(), 3).unwrap();
        for j in 0..12 {
            let q = [(j as f64).cos(), 0.3, -(j as f64).sin()];
            assert_eq!(
                hnsw.query(&q, 5, None).unwrap(),
                exact.query(&q, 5, None).unwrap()
            );
        }
    }
}

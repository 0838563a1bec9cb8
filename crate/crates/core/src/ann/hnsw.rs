use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::Rng;

use super::{ip, AnnIndex, HnswParams};
use crate::rng::{self, tags};

/// Per node, per level, neighbor positions into the index's item arrays.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct HnswGraph {
    pub(crate) links: Vec<Vec<Vec<u32>>>,
    pub(crate) entry: usize,
}

#[derive(Clone, Copy, PartialEq)]
struct Scored {
    score: f64,
    node: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Generation-stamped visited set, reused across searches.
struct Visited {
    stamp: Vec<u32>,
    generation: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Visited {
            stamp: vec![0; n],
            generation: 0,
        }
    }

    fn reset(&mut self) {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.stamp.fill(0);
            self.generation = 1;
        }
    }

    fn insert(&mut self, i: usize) -> bool {
        if self.stamp.len() <= i {
            self.stamp.resize(i + 1, 0);
        }
        let fresh = self.stamp[i] != self.generation;
        self.stamp[i] = self.generation;
        fresh
    }
}

struct Builder<'a> {
    vectors: &'a [f64],
    dim: usize,
    m: usize,
    ef_construction: usize,
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<usize>,
    visited: Visited,
}

impl<'a> Builder<'a> {
    fn vec(&self, i: usize) -> &'a [f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    fn max_links(&self, level: usize) -> usize {
        if level == 0 {
            2 * self.m
        } else {
            self.m
        }
    }

    fn top_level(&self, i: usize) -> usize {
        self.links[i].len() - 1
    }

    fn insert(&mut self, i: usize, level: usize) {
        self.links[i] = vec![Vec::new(); level + 1];
        let Some(entry) = self.entry else {
            self.entry = Some(i);
            return;
        };
        let q = self.vec(i);
        let top = self.top_level(entry);
        let mut eps = vec![Scored {
            score: ip(q, self.vec(entry)),
            node: entry as u32,
        }];
        for l in (level + 1..=top).rev() {
            eps = search_layer(
                &self.links,
                self.vectors,
                self.dim,
                q,
                &eps,
                1,
                l,
                &mut self.visited,
            );
        }
        for l in (0..=level.min(top)).rev() {
            let found = search_layer(
                &self.links,
                self.vectors,
                self.dim,
                q,
                &eps,
                self.ef_construction,
                l,
                &mut self.visited,
            );
            let chosen = select_neighbors(self.vectors, self.dim, &found, self.max_links(l));
            self.links[i][l] = chosen.iter().map(|s| s.node).collect();
            for s in &chosen {
                let n = s.node as usize;
                self.links[n][l].push(i as u32);
                if self.links[n][l].len() > self.max_links(l) {
                    self.shrink(n, l);
                }
            }
            eps = found;
        }
        if level > top {
            self.entry = Some(i);
        }
    }

    fn shrink(&mut self, n: usize, l: usize) {
        let base = self.vec(n);
        let mut cands: Vec<Scored> = self.links[n][l]
            .iter()
            .map(|&c| Scored {
                score: ip(base, self.vec(c as usize)),
                node: c,
            })
            .collect();
        cands.sort_by(|a, b| b.cmp(a));
        let keep = select_neighbors(self.vectors, self.dim, &cands, self.max_links(l));
        self.links[n][l] = keep.iter().map(|s| s.node).collect();
    }
}

/// Beam search on one layer. Returns up to `ef` nodes, best first.
#[allow(clippy::too_many_arguments)]
fn search_layer(
    links: &[Vec<Vec<u32>>],
    vectors: &[f64],
    dim: usize,
    q: &[f64],
    entry: &[Scored],
    ef: usize,
    level: usize,
    visited: &mut Visited,
) -> Vec<Scored> {
    visited.reset();
    let mut candidates: BinaryHeap<Scored> = BinaryHeap::new();
    let mut results: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
    for &e in entry {
        if visited.insert(e.node as usize) {
            candidates.push(e);
            results.push(Reverse(e));
        }
    }
    while results.len() > ef {
        results.pop();
    }
    while let Some(c) = candidates.pop() {
        let worst = results.peek().map(|r| r.0);
        if let Some(w) = worst {
            if results.len() >= ef && c < w {
                break;
            }
        }
        let Some(neighbors) = links[c.node as usize].get(level) else {
            continue;
        };
        for &nb in neighbors {
            if !visited.insert(nb as usize) {
                continue;
            }
            let s = Scored {
                score: ip(q, &vectors[nb as usize * dim..(nb as usize + 1) * dim]),
                node: nb,
            };
            if results.len() < ef || results.peek().is_some_and(|w| s > w.0) {
                candidates.push(s);
                results.push(Reverse(s));
                if results.len() > ef {
                    results.pop();
                }
            }
        }
    }
    let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
    out.sort_by(|a, b| b.cmp(a));
    out
}

/// Diversity heuristic: keep a candidate only if it is closer to the base
/// than to every neighbor already kept, then top up with the best of the
/// rejected ones. `cands` must be sorted best first.
fn select_neighbors(vectors: &[f64], dim: usize, cands: &[Scored], m: usize) -> Vec<Scored> {
    let v = |i: u32| &vectors[i as usize * dim..(i as usize + 1) * dim];
    let mut kept: Vec<Scored> = Vec::with_capacity(m);
    let mut rejected = Vec::new();
    for &c in cands {
        if kept.len() >= m {
            break;
        }
        let diverse = kept.iter().all(|k| c.score > ip(v(c.node), v(k.node)));
        if diverse {
            kept.push(c);
        } else {
            rejected.push(c);
        }
    }
    for c in rejected {
        if kept.len() >= m {
            break;
        }
        kept.push(c);
    }
    kept
}

impl HnswGraph {
    pub(crate) fn build(vectors: &[f64], dim: usize, params: &HnswParams, seed: u64) -> Self {
        let n = vectors.len() / dim;
        let ml = 1.0 / (params.m as f64).ln();
        let mut rng = rng::stream(seed, tags::HNSW);
        let mut b = Builder {
            vectors,
            dim,
            m: params.m,
            ef_construction: params.ef_construction,
            links: vec![Vec::new(); n],
            entry: None,
            visited: Visited::new(n),
        };
        for i in 0..n {
            let u: f64 = rng.random::<f64>();
            let level = (-(1.0 - u).ln() * ml).floor() as usize;
            b.insert(i, level);
        }
        HnswGraph {
            links: b.links,
            entry: b.entry.unwrap_or(0),
        }
    }

    /// Rebuilds the entry point from stored adjacency: the first node with the
    /// highest level.
    pub(crate) fn from_links(links: Vec<Vec<Vec<u32>>>) -> Self {
        let top = links.iter().map(Vec::len).max().unwrap_or(0);
        let entry = links.iter().position(|l| l.len() == top).unwrap_or(0);
        HnswGraph { links, entry }
    }

    pub(crate) fn search(&self, index: &AnnIndex, q: &[f64], ef: usize) -> Vec<(usize, f64)> {
        if self.links.is_empty() {
            return Vec::new();
        }
        let mut visited = Visited::new(self.links.len());
        let top = self.links[self.entry].len().saturating_sub(1);
        let mut eps = vec![Scored {
            score: ip(q, index.vector(self.entry)),
            node: self.entry as u32,
        }];
        for l in (1..=top).rev() {
            eps = search_layer(
                &self.links,
                &index.vectors,
                index.dim,
                q,
                &eps,
                1,
                l,
                &mut visited,
            );
        }
        search_layer(
            &self.links,
            &index.vectors,
            index.dim,
            q,
            &eps,
            ef,
            0,
            &mut visited,
        )
        .into_iter()
        .map(|s| (s.node as usize, s.score))
        .collect()
    }
}

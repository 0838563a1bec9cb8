use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{EmbeddingModel, Optimizer, TrainParams};
use crate::error::{Error, Result};
use crate::graph::{Edge, EdgeDelta, EntityType, HetGraph, Relation, Vertex};
use crate::rng::{self, tags};

const ADAGRAD_EPS: f64 = 1e-10;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean per-positive loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub converged: bool,
}

/// Gradient of the mean batch loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradient {
    pub entities: BTreeMap<Vertex, Vec<f64>>,
    pub relations: BTreeMap<Relation, Vec<f64>>,
}

#[derive(Clone, Copy)]
struct Item {
    h: usize,
    r: Relation,
    t: usize,
}

/// Sparse gradient accumulator over entity rows.
struct GradBuf {
    dim: usize,
    ent: Vec<f64>,
    touched: Vec<usize>,
    flag: Vec<bool>,
    rel: BTreeMap<Relation, Vec<f64>>,
}

impl GradBuf {
    fn new(rows: usize, dim: usize) -> Self {
        GradBuf {
            dim,
            ent: vec![0.0; rows * dim],
            touched: Vec::new(),
            flag: vec![false; rows],
            rel: BTreeMap::new(),
        }
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        if !self.flag[r] {
            self.flag[r] = true;
            self.touched.push(r);
        }
        &mut self.ent[r * self.dim..(r + 1) * self.dim]
    }

    fn rel_mut(&mut self, r: Relation) -> &mut [f64] {
        let dim = self.dim;
        self.rel.entry(r).or_insert_with(|| vec![0.0; dim])
    }

    fn clear(&mut self) {
        for &r in &self.touched {
            self.ent[r * self.dim..(r + 1) * self.dim].fill(0.0);
            self.flag[r] = false;
        }
        self.touched.clear();
        self.rel.clear();
    }
}

/// Loss of one positive against its negatives, accumulating `scale` times
/// its gradient into `buf`. Returns the unscaled loss.
fn item_loss_grad(
    model: &EmbeddingModel,
    item: Item,
    negs: &[usize],
    reg: f64,
    scale: f64,
    buf: &mut GradBuf,
) -> f64 {
    let dim = model.dim;
    let h = model.row(item.h);
    let t = model.row(item.t);
    let r = &model.relations[&item.r];
    let q: Vec<f64> = h.iter().zip(r).map(|(a, b)| a + b).collect();

    let dotq = |row: usize| -> f64 { q.iter().zip(model.row(row)).map(|(a, b)| a * b).sum() };
    let s0 = dotq(item.t);
    let scores: Vec<f64> = negs.iter().map(|&n| dotq(n)).collect();
    let m = scores.iter().copied().fold(s0, f64::max);
    let z = (s0 - m).exp() + scores.iter().map(|s| (s - m).exp()).sum::<f64>();
    let lse = m + z.ln();
    let norm2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let loss = -s0 + lse + reg * (norm2(h) + norm2(t));

    let p0 = (s0 - m).exp() / z;
    let mut gq: Vec<f64> = t.iter().map(|x| (p0 - 1.0) * x).collect();
    for (&n, s) in negs.iter().zip(&scores) {
        let p = (s - m).exp() / z;
        for (g, x) in gq.iter_mut().zip(model.row(n)) {
            *g += p * x;
        }
        for (g, x) in buf.row_mut(n).iter_mut().zip(&q) {
            *g += scale * p * x;
        }
    }
    let h_copy = h.to_vec();
    let t_copy = t.to_vec();
    for k in 0..dim {
        buf.row_mut(item.t)[k] += scale * ((p0 - 1.0) * q[k] + 2.0 * reg * t_copy[k]);
    }
    for k in 0..dim {
        buf.row_mut(item.h)[k] += scale * (gq[k] + 2.0 * reg * h_copy[k]);
    }
    for (g, x) in buf.rel_mut(item.r).iter_mut().zip(&gq) {
        *g += scale * x;
    }
    loss
}

fn row_of(model: &EmbeddingModel, v: &Vertex) -> Result<usize> {
    model
        .rows
        .get(v)
        .copied()
        .ok_or_else(|| super::lookup_error(v))
}

fn check_relation(model: &EmbeddingModel, r: Relation) -> Result<()> {
    if model.relations.contains_key(&r) {
        Ok(())
    } else {
        Err(Error::Lookup {
            kind: "relation",
            id: r.code() as u64,
        })
    }
}

/// Mean loss over `positives`, each scored against its own explicit
/// `negatives`, and the gradient of that mean with respect to every vector
/// involved.
pub fn loss_and_grad(
    model: &EmbeddingModel,
    positives: &[(Vertex, Relation, Vertex)],
    negatives: &[Vec<Vertex>],
    reg: f64,
) -> Result<(f64, Gradient)> {
    if positives.len() != negatives.len() {
        return Err(Error::Argument(format!(
            "{} positives but {} negative lists",
            positives.len(),
            negatives.len()
        )));
    }
    if positives.is_empty() {
        return Ok((0.0, Gradient::default()));
    }
    let scale = 1.0 / positives.len() as f64;
    let mut buf = GradBuf::new(model.len(), model.dim);
    let mut total = 0.0;
    for ((h, r, t), negs) in positives.iter().zip(negatives) {
        check_relation(model, *r)?;
        let item = Item {
            h: row_of(model, h)?,
            r: *r,
            t: row_of(model, t)?,
        };
        let negs = negs
            .iter()
            .map(|n| row_of(model, n))
            .collect::<Result<Vec<_>>>()?;
        total += item_loss_grad(model, item, &negs, reg, scale, &mut buf);
    }
    let keys: BTreeMap<usize, Vertex> = model.rows.iter().map(|(k, &r)| (r, *k)).collect();
    let entities = buf
        .touched
        .iter()
        .map(|&r| {
            (
                keys[&r],
                buf.ent[r * model.dim..(r + 1) * model.dim].to_vec(),
            )
        })
        .collect();
    Ok((
        total * scale,
        Gradient {
            entities,
            relations: buf.rel,
        },
    ))
}

struct Optim {
    kind: Optimizer,
    lr: f64,
    ent_acc: Vec<f64>,
    rel_acc: BTreeMap<Relation, Vec<f64>>,
    frozen: Vec<bool>,
    train_relations: bool,
}

impl Optim {
    fn step(value: &mut f64, g: f64, acc: &mut f64, kind: Optimizer, lr: f64) {
        match kind {
            Optimizer::Sgd => *value -= lr * g,
            Optimizer::Adagrad => {
                *acc += g * g;
                *value -= lr * g / (acc.sqrt() + ADAGRAD_EPS);
            }
        }
    }

    fn apply(&mut self, model: &mut EmbeddingModel, buf: &GradBuf) {
        let dim = model.dim;
        for &r in &buf.touched {
            if self.frozen[r] {
                continue;
            }
            for k in 0..dim {
                let i = r * dim + k;
                Self::step(
                    &mut model.data[i],
                    buf.ent[i],
                    &mut self.ent_acc[i],
                    self.kind,
                    self.lr,
                );
            }
        }
        if self.train_relations {
            for (rel, g) in &buf.rel {
                let acc = self.rel_acc.entry(*rel).or_insert_with(|| vec![0.0; dim]);
                let v = model.relations.get_mut(rel).expect("relation present");
                for k in 0..dim {
                    Self::step(&mut v[k], g[k], &mut acc[k], self.kind, self.lr);
                }
            }
        }
    }
}

fn expand_items(model: &EmbeddingModel, edges: &[Edge]) -> Result<Vec<Item>> {
    let mut items = Vec::new();
    for e in edges {
        check_relation(model, e.relation)?;
        let item = Item {
            h: row_of(model, &e.head)?,
            r: e.relation,
            t: row_of(model, &e.tail)?,
        };
        items.extend(std::iter::repeat_n(item, e.weight as usize));
    }
    Ok(items)
}

fn type_pools(model: &EmbeddingModel) -> BTreeMap<EntityType, Vec<usize>> {
    let mut pools: BTreeMap<EntityType, Vec<usize>> = BTreeMap::new();
    for (k, &r) in &model.rows {
        pools.entry(k.entity_type).or_default().push(r);
    }
    pools
}

/// One pass over `order`, updating the model when `optim` is given.
/// Returns the mean per-positive loss.
#[allow(clippy::too_many_arguments)]
fn pass(
    model: &mut EmbeddingModel,
    items: &[Item],
    order: &[usize],
    params: &TrainParams,
    pools: &BTreeMap<EntityType, Vec<usize>>,
    tail_types: &[EntityType],
    rng: &mut ChaCha8Rng,
    mut optim: Option<&mut Optim>,
) -> Result<f64> {
    let mut buf = GradBuf::new(model.len(), model.dim);
    let mut total = 0.0;
    for chunk in order.chunks(params.batch_size) {
        for rel in Relation::ALL {
            let group: Vec<Item> = chunk
                .iter()
                .map(|&i| items[i])
                .filter(|it| it.r == rel)
                .collect();
            if group.is_empty() {
                continue;
            }
            let scale = 1.0 / group.len() as f64;
            let pool = &pools[&tail_types[rel.code() as usize]];
            for (i, item) in group.iter().enumerate() {
                let mut negs: Vec<usize> = group
                    .iter()
                    .enumerate()
                    .filter(|&(j, other)| j != i && other.t != item.t)
                    .map(|(_, other)| other.t)
                    .take(params.negatives_batch)
                    .collect();
                negs.extend(
                    (0..params.negatives_uniform)
                        .map(|_| pool[rng.random_range(0..pool.len())])
                        .filter(|&n| n != item.t),
                );
                let loss = item_loss_grad(model, *item, &negs, params.reg, scale, &mut buf);
                if !loss.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss {loss} on a {rel:?} edge; lower the learning rate or raise reg"
                    )));
                }
                total += loss;
            }
            if let Some(o) = optim.as_deref_mut() {
                o.apply(model, &buf);
            }
            buf.clear();
        }
    }
    Ok(total / order.len().max(1) as f64)
}

fn tail_types(edges: &[Edge]) -> Vec<EntityType> {
    let mut types = vec![EntityType::Ad, EntityType::Ad, EntityType::Advertiser];
    for e in edges {
        types[e.relation.code() as usize] = e.tail.entity_type;
    }
    types
}

fn run_epochs(
    model: &mut EmbeddingModel,
    edges: &[Edge],
    params: &TrainParams,
    frozen: &BTreeSet<Vertex>,
    train_relations: bool,
) -> Result<TrainReport> {
    let items = expand_items(model, edges)?;
    let pools = type_pools(model);
    let tails = tail_types(edges);
    let mut frozen_rows = vec![false; model.len()];
    for v in frozen {
        if let Some(&r) = model.rows.get(v) {
            frozen_rows[r] = true;
        }
    }
    let mut optim = Optim {
        kind: params.optimizer,
        lr: params.learning_rate,
        ent_acc: vec![0.0; model.data.len()],
        rel_acc: BTreeMap::new(),
        frozen: frozen_rows,
        train_relations,
    };
    let mut rng = rng::stream(params.seed, tags::TRAIN);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut report = TrainReport::default();
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        let loss = pass(
            model,
            &items,
            &order,
            params,
            &pools,
            &tails,
            &mut rng,
            Some(&mut optim),
        )?;
        let done = report
            .epoch_losses
            .last()
            .is_some_and(|&prev| (prev - loss).abs() <= params.tol * prev.abs());
        report.epoch_losses.push(loss);
        if done {
            report.converged = true;
            break;
        }
    }
    Ok(report)
}

/// Trains on `graph`, warm-starting from `init` when given. Entities in the
/// starting model's `frozen` set never change.
pub fn train(
    graph: &HetGraph,
    params: &TrainParams,
    init: Option<&EmbeddingModel>,
) -> Result<EmbeddingModel> {
    train_reporting(graph, params, init).map(|(m, _)| m)
}

pub fn train_reporting(
    graph: &HetGraph,
    params: &TrainParams,
    init: Option<&EmbeddingModel>,
) -> Result<(EmbeddingModel, TrainReport)> {
    params.validate()?;
    if graph.edges.is_empty() {
        return Err(Error::Training("graph has no edges to train on".into()));
    }
    let mut model = match init {
        Some(m) if m.dim != params.dim => {
            return Err(Error::Argument(format!(
                "initial model has dim {} but params ask for {}",
                m.dim, params.dim
            )))
        }
        Some(m) if params.epochs == 0 => return Ok((m.clone(), TrainReport::default())),
        Some(m) => m.clone(),
        None => EmbeddingModel::new(params.dim),
    };
    model.ensure_entities(&graph.vertices, params.seed, params.init_std);
    model.ensure_relations(
        graph.edges.iter().map(|e| e.relation),
        params.seed,
        params.init_std,
    );
    let frozen = model.frozen.clone();
    let report = run_epochs(&mut model, &graph.edges, params, &frozen, true)?;
    Ok((model, report))
}

/// Fits vertices new in `delta` on the delta edges alone. Every entity and
/// relation vector already in `model` is left bit-identical.
pub fn tic_update(
    model: &EmbeddingModel,
    delta: &EdgeDelta,
    params: &TrainParams,
) -> Result<EmbeddingModel> {
    params.validate()?;
    if model.dim != params.dim {
        return Err(Error::Argument(format!(
            "model has dim {} but params ask for {}",
            model.dim, params.dim
        )));
    }
    for e in &delta.delta_edges {
        check_relation(model, e.relation)?;
    }
    let mut next = model.clone();
    let old: BTreeSet<Vertex> = model.rows.keys().copied().collect();
    let endpoints: Vec<Vertex> = delta
        .delta_edges
        .iter()
        .flat_map(|e| [e.head, e.tail])
        .collect();
    next.ensure_entities(
        delta.new_vertices.iter().chain(&endpoints),
        params.seed,
        params.init_std,
    );
    if !delta.delta_edges.is_empty() && params.epochs > 0 {
        run_epochs(&mut next, &delta.delta_edges, params, &old, false)?;
    }
    next.frozen = old;
    next.version.tic_step += 1;
    Ok(next)
}

/// Unfreezes everything and retrains on the merged edge list from the
/// current vectors.
pub fn toc_update(
    model: &EmbeddingModel,
    merged_edges: &[Edge],
    params: &TrainParams,
) -> Result<EmbeddingModel> {
    params.validate()?;
    if model.dim != params.dim {
        return Err(Error::Argument(format!(
            "model has dim {} but params ask for {}",
            model.dim, params.dim
        )));
    }
    let mut next = model.clone();
    next.frozen.clear();
    next.version.toc_epoch += 1;
    next.version.tic_step = 0;
    if merged_edges.is_empty() || params.epochs == 0 {
        return Ok(next);
    }
    let endpoints: Vec<Vertex> = merged_edges.iter().flat_map(|e| [e.head, e.tail]).collect();
    next.ensure_entities(&endpoints, params.seed, params.init_std);
    next.ensure_relations(
        merged_edges.iter().map(|e| e.relation),
        params.seed,
        params.init_std,
    );
    run_epochs(&mut next, merged_edges, params, &BTreeSet::new(), true)?;
    Ok(next)
}

/// Mean per-positive loss over `edges` in edge order, with uniform
/// negatives drawn from a stream fixed by `params.seed`. Two models
/// evaluated with the same params see identical negatives.
pub fn mean_loss(model: &EmbeddingModel, edges: &[Edge], params: &TrainParams) -> Result<f64> {
    let mut scratch = model.clone();
    let items = expand_items(&scratch, edges)?;
    let order: Vec<usize> = (0..items.len()).collect();
    let pools = type_pools(&scratch);
    let tails = tail_types(edges);
    let mut rng = rng::stream(params.seed, tags::TRAIN ^ 0xE7A1);
    pass(
        &mut scratch,
        &items,
        &order,
        params,
        &pools,
        &tails,
        &mut rng,
        None,
    )
}

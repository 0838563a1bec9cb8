//! Trainer, tic/toc and embedding-derivation checks.

use std::collections::BTreeSet;

use adsource::embed::{
    decay_user_embedding, initial_vector, loss_and_grad, mean_loss, propagate_embeddings,
    tic_update, toc_update, train, DecayParams, EmbeddingModel, FollowGraph, Optimizer,
    TrainParams,
};
use adsource::graph::{graph_from_edges, merge_edges, Edge, EdgeDelta, Relation, Vertex, Window};
use adsource::world::UserId;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn edge(h: Vertex, r: Relation, t: Vertex) -> Edge {
    Edge {
        head: h,
        relation: r,
        tail: t,
        timestamp: 0,
        weight: 1,
    }
}

/// Users 0..n_users engage ads by `user % n_ads` plus a few extra links.
fn base_edges(n_users: u32, n_ads: u32) -> Vec<Edge> {
    let mut out = Vec::new();
    for u in 0..n_users {
        out.push(edge(
            Vertex::user(u),
            Relation::EngagedPos,
            Vertex::ad(u % n_ads),
        ));
        out.push(edge(
            Vertex::user(u),
            Relation::EngagedPos,
            Vertex::ad((u * 7 + 3) % n_ads),
        ));
    }
    for a in 0..n_ads {
        out.push(edge(
            Vertex::ad(a),
            Relation::AuthoredBy,
            Vertex::advertiser(a % 4),
        ));
    }
    out
}

fn params() -> TrainParams {
    TrainParams {
        dim: 16,
        negatives_batch: 32,
        negatives_uniform: 32,
        epochs: 40,
        batch_size: 64,
        learning_rate: 0.05,
        tol: 0.0,
        ..TrainParams::default()
    }
}

fn window() -> Window {
    Window::new(0, 100).unwrap()
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = EmbeddingModel::new(4);
    let users: Vec<Vertex> = (0..3).map(Vertex::user).collect();
    let ads: Vec<Vertex> = (0..4).map(Vertex::ad).collect();
    for v in users.iter().chain(&ads) {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-0.8..0.8)).collect();
        model.set_vector(*v, &x).unwrap();
    }
    for r in [Relation::EngagedPos, Relation::EngagedNeg] {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
        model.set_relation(r, &x).unwrap();
    }
    let positives = vec![
        (users[0], Relation::EngagedPos, ads[0]),
        (users[0], Relation::EngagedPos, ads[1]),
        (users[1], Relation::EngagedNeg, ads[2]),
        (users[2], Relation::EngagedPos, ads[3]),
        (users[1], Relation::EngagedPos, ads[0]),
    ];
    let negatives: Vec<Vec<Vertex>> = positives
        .iter()
        .map(|(_, _, t)| ads.iter().filter(|a| *a != t).copied().collect())
        .collect();
    let reg = 1e-2;
    let (_, grad) = loss_and_grad(&model, &positives, &negatives, reg).unwrap();

    let h = 1e-4;
    let loss_at = |m: &EmbeddingModel| loss_and_grad(m, &positives, &negatives, reg).unwrap().0;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for v in users.iter().chain(&ads) {
        let base = model.vector(v).unwrap().to_vec();
        for k in 0..4 {
            let mut plus = model.clone();
            let mut minus = model.clone();
            let mut x = base.clone();
            x[k] += h;
            plus.set_vector(*v, &x).unwrap();
            x[k] -= 2.0 * h;
            minus.set_vector(*v, &x).unwrap();
            numeric.push((loss_at(&plus) - loss_at(&minus)) / (2.0 * h));
            analytic.push(grad.entities.get(v).map_or(0.0, |g| g[k]));
        }
    }
    for r in [Relation::EngagedPos, Relation::EngagedNeg] {
        let base = model.relation(r).unwrap().to_vec();
        for k in 0..4 {
            let mut plus = model.clone();
            let mut minus = model.clone();
            let mut x = base.clone();
            x[k] += h;
            plus.set_relation(r, &x).unwrap();
            x[k] -= 2.0 * h;
            minus.set_relation(r, &x).unwrap();
            numeric.push((loss_at(&plus) - loss_at(&minus)) / (2.0 * h));
            analytic.push(grad.relations.get(&r).map_or(0.0, |g| g[k]));
        }
    }
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    assert!(
        diff / scale < 1e-4,
        "relative gradient error {}",
        diff / scale
    );
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(
            (a - n).abs() <= 1e-4 * a.abs().max(n.abs()).max(1e-3),
            "{a} vs {n}"
        );
    }
}

#[test]
fn tic_places_new_user_near_its_engaged_ad() {
    let g = graph_from_edges(base_edges(60, 40), window());
    let model = train(&g, &params(), None).unwrap();
    let target = Vertex::ad(17);
    let new_user = Vertex::user(1000);
    let delta = EdgeDelta {
        new_vertices: [new_user].into(),
        delta_edges: vec![edge(new_user, Relation::EngagedPos, target)],
    };
    let ticked = tic_update(
        &model,
        &delta,
        &TrainParams {
            epochs: 200,
            ..params()
        },
    )
    .unwrap();
    let score = |a: &Vertex| {
        ticked
            .score_edge(&new_user, Relation::EngagedPos, a)
            .unwrap()
    };
    let s_target = score(&target);
    let others: Vec<f64> = (0..40)
        .filter(|&a| a != 17)
        .map(|a| score(&Vertex::ad(a)))
        .collect();
    let beaten = others.iter().filter(|&&s| s < s_target).count();
    assert!(
        beaten as f64 >= 0.95 * others.len() as f64,
        "target beats {beaten} of {}",
        others.len()
    );
}

#[test]
fn toc_relaxes_below_tic_loss() {
    let g = graph_from_edges(base_edges(60, 40), window());
    let p = params();
    let model = train(&g, &p, None).unwrap();
    let extra: Vec<Edge> = (0..15)
        .map(|i| {
            edge(
                Vertex::user(500 + i),
                Relation::EngagedPos,
                Vertex::ad(i % 40),
            )
        })
        .chain((0..10).map(|i| {
            edge(
                Vertex::user(i),
                Relation::EngagedPos,
                Vertex::ad((i + 20) % 40),
            )
        }))
        .collect();
    let delta = EdgeDelta {
        new_vertices: (0..15).map(|i| Vertex::user(500 + i)).collect(),
        delta_edges: extra,
    };
    let ticked = tic_update(&model, &delta, &p).unwrap();
    let merged = merge_edges(&g.edges, &delta);
    let tocked = toc_update(&ticked, &merged, &p).unwrap();
    let tic_loss = mean_loss(&ticked, &merged, &p).unwrap();
    let toc_loss = mean_loss(&tocked, &merged, &p).unwrap();
    assert!(toc_loss <= tic_loss, "toc {toc_loss} > tic {tic_loss}");
    assert!(tocked.frozen.is_empty());
    assert_eq!(tocked.version.toc_epoch, 1);
    assert_eq!(tocked.version.tic_step, 0);
}

#[test]
fn sgd_and_adagrad_are_both_deterministic() {
    let g = graph_from_edges(base_edges(20, 10), window());
    for optimizer in [Optimizer::Sgd, Optimizer::Adagrad] {
        let p = TrainParams {
            optimizer,
            epochs: 5,
            ..params()
        };
        assert_eq!(train(&g, &p, None).unwrap(), train(&g, &p, None).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tic_never_moves_existing_vectors(
        links in prop::collection::vec((0u32..30, 0u32..20, any::<bool>()), 1..40),
        seed in 0u64..1000,
    ) {
        let g = graph_from_edges(base_edges(30, 20), window());
        let p = TrainParams { epochs: 3, seed, ..params() };
        let model = train(&g, &p, None).unwrap();
        let delta_edges: Vec<Edge> = links
            .iter()
            .map(|&(u, a, new)| {
                let head = if new { Vertex::user(100 + u) } else { Vertex::user(u) };
                edge(head, Relation::EngagedPos, Vertex::ad(a))
            })
            .collect();
        let new_vertices: BTreeSet<Vertex> =
            delta_edges.iter().map(|e| e.head).filter(|v| !model.contains(v)).collect();
        let delta = EdgeDelta { new_vertices: new_vertices.clone(), delta_edges };
        let ticked = tic_update(&model, &delta, &p).unwrap();
        for (k, v) in model.entities() {
            prop_assert_eq!(ticked.vector(k).unwrap(), v);
        }
        for (r, v) in model.relations() {
            prop_assert_eq!(ticked.relation(*r).unwrap(), v);
        }
        for v in &new_vertices {
            let init = initial_vector(p.seed, v, p.dim, p.init_std);
            prop_assert_ne!(ticked.vector(v).unwrap(), init.as_slice());
        }
        prop_assert_eq!(ticked.version.tic_step, model.version.tic_step + 1);
    }

    #[test]
    fn decayed_embedding_is_the_weighted_mean(
        history in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 3), 0u64..30 * 86_400), 1..60),
        lambda in 0.01f64..2.0,
        last_n in 1usize..80,
    ) {
        let t0 = 30 * 86_400;
        let refs: Vec<(&[f64], u64)> = history.iter().map(|(v, t)| (v.as_slice(), *t)).collect();
        let p = DecayParams { lambda, last_n };
        let out = decay_user_embedding(&refs, t0, &p).unwrap().unwrap();

        let mut sorted = history.clone();
        sorted.sort_by_key(|r| std::cmp::Reverse(r.1));
        sorted.truncate(last_n);
        let weights: Vec<f64> = sorted
            .iter()
            .map(|(_, t)| (-lambda * (t0 - t) as f64 / 86_400.0).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        for k in 0..3 {
            let expect = sorted.iter().zip(&weights).map(|((v, _), w)| w * v[k]).sum::<f64>() / total;
            prop_assert!((out[k] - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
            let lo = sorted.iter().map(|(v, _)| v[k]).fold(f64::INFINITY, f64::min);
            let hi = sorted.iter().map(|(v, _)| v[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[k] >= lo - 1e-9 && out[k] <= hi + 1e-9);
        }
    }

    #[test]
    fn propagation_leaves_embedded_users_alone(
        follows in prop::collection::vec(prop::collection::vec(0u32..60, 0..30), 60),
        embedded in prop::collection::btree_set(0u32..60, 0..40),
        cap in 1usize..10,
    ) {
        let mut table = EmbeddingModel::new(2);
        for &u in &embedded {
            table.set_vector(Vertex::user(u), &[u as f64, 1.0]).unwrap();
        }
        let graph: FollowGraph = follows
            .iter()
            .enumerate()
            .map(|(u, f)| (UserId(u as u32), f.iter().map(|&x| UserId(x)).collect()))
            .collect();
        let out = propagate_embeddings(&graph, &table, cap, 3).unwrap();
        for (k, v) in table.entities() {
            prop_assert_eq!(out.vector(k).unwrap(), v);
        }
        for (u, f) in graph {
            let has_embedded_following = f.iter().any(|x| embedded.contains(&x.0));
            let covered = out.contains(&Vertex::user(u.0));
            prop_assert_eq!(covered, embedded.contains(&u.0) || has_embedded_following);
        }
    }
}

//! Property checks for graph snapshots, deltas and merges against multiset oracles.

use std::collections::BTreeMap;

use adsource::graph::{build_graph, delta_edges, merge_edges, Edge, HetGraph, Triple, Window};
use adsource::world::{AdId, AdvertiserId, EventRecord, EventType, UserId};
use proptest::prelude::*;

fn event_strategy(max_ts: u64) -> impl Strategy<Value = EventRecord> {
    (0..max_ts, 0u32..40, 0u32..60, 0usize..4).prop_map(|(ts, u, a, kind)| EventRecord {
        ts,
        user_id: UserId(u),
        ad_id: AdId(a),
        advertiser_id: AdvertiserId(a % 7),
        event: [
            EventType::PositiveEngagement,
            EventType::NegativeEngagement,
            EventType::Impression,
            EventType::Conversion,
        ][kind],
        objective: 1,
    })
}

fn multiset(edges: &[Edge]) -> BTreeMap<Triple, u64> {
    let mut m = BTreeMap::new();
    for e in edges {
        *m.entry(e.triple()).or_insert(0) += e.weight;
    }
    m
}

/// Engagement count per triple computed straight from the raw events.
fn count_engagements(events: &[EventRecord], window: Window) -> BTreeMap<Triple, u64> {
    let mut m = BTreeMap::new();
    for ev in events.iter().filter(|e| window.contains(e.ts)) {
        let rel = match ev.event {
            EventType::PositiveEngagement => adsource::graph::Relation::EngagedPos,
            EventType::NegativeEngagement => adsource::graph::Relation::EngagedNeg,
            _ => continue,
        };
        let key = (
            adsource::graph::Vertex::user(ev.user_id.0),
            rel,
            adsource::graph::Vertex::ad(ev.ad_id.0),
        );
        *m.entry(key).or_insert(0) += 1;
    }
    m
}

fn snapshots(events: &[EventRecord], split: u64, end: u64) -> (HetGraph, HetGraph) {
    let (prev, _) = build_graph(events, Window::new(0, split).unwrap()).unwrap();
    let (curr, _) = build_graph(events, Window::new(0, end).unwrap()).unwrap();
    (prev, curr)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn engaged_weights_match_raw_counts(events in prop::collection::vec(event_strategy(1000), 0..400)) {
        let window = Window::new(100, 900).unwrap();
        let (g, _) = build_graph(&events, window).unwrap();
        let engaged: Vec<Edge> = g
            .edges
            .iter()
            .filter(|e| e.relation != adsource::graph::Relation::AuthoredBy)
            .copied()
            .collect();
        prop_assert_eq!(multiset(&engaged), count_engagements(&events, window));
        prop_assert!(g.is_closed());
        prop_assert!(g.edges.iter().all(|e| window.contains(e.timestamp) && e.weight >= 1));
    }

    #[test]
    fn delta_equals_multiset_difference(
        events in prop::collection::vec(event_strategy(1000), 0..600),
        split in 1u64..999,
    ) {
        let (prev, curr) = snapshots(&events, split, 999);
        let delta = delta_edges(&prev, &curr).unwrap();

        let prev_m = multiset(&prev.edges);
        let mut oracle: BTreeMap<Triple, u64> = BTreeMap::new();
        for (t, w) in multiset(&curr.edges) {
            let diff = w - prev_m.get(&t).copied().unwrap_or(0);
            if diff > 0 {
                oracle.insert(t, diff);
            }
        }
        prop_assert_eq!(multiset(&delta.delta_edges), oracle);

        let oracle_new: Vec<_> = curr.vertices.iter().filter(|v| !prev.vertices.contains(v)).copied().collect();
        prop_assert_eq!(delta.new_vertices.iter().copied().collect::<Vec<_>>(), oracle_new);

        for e in &delta.delta_edges {
            prop_assert!(
                delta.new_vertices.contains(&e.head)
                    || delta.new_vertices.contains(&e.tail)
                    || e.timestamp > prev.window.t_end
            );
        }
    }

    #[test]
    fn merge_restores_current_snapshot(
        events in prop::collection::vec(event_strategy(1000), 0..600),
        split in 1u64..999,
    ) {
        let (prev, curr) = snapshots(&events, split, 999);
        let delta = delta_edges(&prev, &curr).unwrap();
        let merged = merge_edges(&prev.edges, &delta);
        prop_assert_eq!(multiset(&merged), multiset(&curr.edges));
    }

    #[test]
    fn disjoint_merge_is_concatenation(
        a in prop::collection::vec(event_strategy(500), 0..100),
        b in prop::collection::vec(event_strategy(500), 0..100),
    ) {
        let w = Window::new(0, 500).unwrap();
        let (ga, _) = build_graph(&a, w).unwrap();
        let shifted: Vec<EventRecord> = b
            .into_iter()
            .map(|mut e| {
                e.user_id = UserId(e.user_id.0 + 1000);
                e.ad_id = AdId(e.ad_id.0 + 1000);
                e.advertiser_id = AdvertiserId(e.advertiser_id.0 + 1000);
                e
            })
            .collect();
        let (gb, _) = build_graph(&shifted, w).unwrap();
        let delta = adsource::graph::EdgeDelta { new_vertices: gb.vertices.clone(), delta_edges: gb.edges.clone() };
        let merged = merge_edges(&ga.edges, &delta);
        prop_assert_eq!(merged.len(), ga.edges.len() + gb.edges.len());
        let mut concat = multiset(&ga.edges);
        concat.extend(multiset(&gb.edges));
        prop_assert_eq!(multiset(&merged), concat);
    }
}

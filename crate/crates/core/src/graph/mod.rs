//! Heterogeneous engagement multigraph over users, ads and advertisers.
//!
//! Repeated engagements between the same pair collapse into a single edge
//! whose `weight` counts them and whose `timestamp` is the latest one. Every
//! ad that appears in the window also gets an `authored_by` edge to its
//! advertiser, stamped with the ad's first in-window appearance.

mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{EventRecord, EventType, Timestamp};

pub use store::{load_snapshot, read_event_log_lenient, save_snapshot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum EntityType {
    User = 0,
    Ad = 1,
    Advertiser = 2,
}

impl EntityType {
    pub const ALL: [EntityType; 3] = [EntityType::User, EntityType::Ad, EntityType::Advertiser];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Vertex {
    pub entity_type: EntityType,
    pub id: u64,
}

impl Vertex {
    pub fn user(id: u32) -> Self {
        Vertex {
            entity_type: EntityType::User,
            id: id as u64,
        }
    }

    pub fn ad(id: u32) -> Self {
        Vertex {
            entity_type: EntityType::Ad,
            id: id as u64,
        }
    }

    pub fn advertiser(id: u32) -> Self {
        Vertex {
            entity_type: EntityType::Advertiser,
            id: id as u64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Relation {
    EngagedPos = 0,
    EngagedNeg = 1,
    AuthoredBy = 2,
}

impl Relation {
    pub const ALL: [Relation; 3] = [
        Relation::EngagedPos,
        Relation::EngagedNeg,
        Relation::AuthoredBy,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

pub type Triple = (Vertex, Relation, Vertex);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub head: Vertex,
    pub relation: Relation,
    pub tail: Vertex,
    pub timestamp: Timestamp,
    pub weight: u64,
}

impl Edge {
    pub fn triple(&self) -> Triple {
        (self.head, self.relation, self.tail)
    }
}

/// Inclusive time window `[t_start, t_end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub t_start: Timestamp,
    pub t_end: Timestamp,
}

impl Window {
    pub fn new(t_start: Timestamp, t_end: Timestamp) -> Result<Self> {
        if t_start >= t_end {
            return Err(Error::Argument(format!(
                "window start {t_start} must precede end {t_end}"
            )));
        }
        Ok(Window { t_start, t_end })
    }

    pub fn contains(&self, ts: Timestamp) -> bool {
        (self.t_start..=self.t_end).contains(&ts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HetGraph {
    pub vertices: BTreeSet<Vertex>,
    /// Sorted by `(head, relation, tail)`, one edge per triple.
    pub edges: Vec<Edge>,
    pub window: Window,
}

impl HetGraph {
    pub fn empty(window: Window) -> Self {
        HetGraph {
            vertices: BTreeSet::new(),
            edges: Vec::new(),
            window,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn vertices_of(&self, kind: EntityType) -> impl Iterator<Item = &Vertex> {
        self.vertices.iter().filter(move |v| v.entity_type == kind)
    }

    /// True when every edge endpoint is a vertex.
    pub fn is_closed(&self) -> bool {
        self.edges
            .iter()
            .all(|e| self.vertices.contains(&e.head) && self.vertices.contains(&e.tail))
    }
}

/// Counts of how each input record was used while building a graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub engagements_used: usize,
    pub out_of_window: usize,
    /// Impressions and conversions carry no edge of their own.
    pub non_edge_events: usize,
    /// Records that failed to parse or contradict earlier records.
    pub dropped_invalid: usize,
}

/// Builds the engagement graph from the events inside `window`.
pub fn build_graph(events: &[EventRecord], window: Window) -> Result<(HetGraph, BuildReport)> {
    if window.t_start >= window.t_end {
        return Err(Error::Argument(format!(
            "window start {} must precede end {}",
            window.t_start, window.t_end
        )));
    }
    let mut report = BuildReport::default();
    let mut engaged: BTreeMap<Triple, (Timestamp, u64)> = BTreeMap::new();
    let mut authored: BTreeMap<Vertex, (Vertex, Timestamp)> = BTreeMap::new();

    for ev in events {
        let relation = match ev.event {
            EventType::PositiveEngagement => Relation::EngagedPos,
            EventType::NegativeEngagement => Relation::EngagedNeg,
            EventType::Impression | EventType::Conversion => {
                report.non_edge_events += 1;
                continue;
            }
        };
        if !window.contains(ev.ts) {
            report.out_of_window += 1;
            continue;
        }
        let ad = Vertex::ad(ev.ad_id.0);
        let advertiser = Vertex::advertiser(ev.advertiser_id.0);
        match authored.get_mut(&ad) {
            Some((known, first)) => {
                if *known != advertiser {
                    report.dropped_invalid += 1;
                    continue;
                }
                *first = (*first).min(ev.ts);
            }
            None => {
                authored.insert(ad, (advertiser, ev.ts));
            }
        }
        report.engagements_used += 1;
        let entry = engaged
            .entry((Vertex::user(ev.user_id.0), relation, ad))
            .or_insert((ev.ts, 0));
        entry.0 = entry.0.max(ev.ts);
        entry.1 += 1;
    }

    let mut edges: Vec<Edge> = engaged
        .into_iter()
        .map(|((head, relation, tail), (timestamp, weight))| Edge {
            head,
            relation,
            tail,
            timestamp,
            weight,
        })
        .chain(authored.into_iter().map(|(ad, (advertiser, first))| Edge {
            head: ad,
            relation: Relation::AuthoredBy,
            tail: advertiser,
            timestamp: first,
            weight: 1,
        }))
        .collect();
    edges.sort_by_key(Edge::triple);
    let vertices = edges.iter().flat_map(|e| [e.head, e.tail]).collect();
    Ok((
        HetGraph {
            vertices,
            edges,
            window,
        },
        report,
    ))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgeDelta {
    pub new_vertices: BTreeSet<Vertex>,
    pub delta_edges: Vec<Edge>,
}

impl EdgeDelta {
    pub fn is_empty(&self) -> bool {
        self.new_vertices.is_empty() && self.delta_edges.is_empty()
    }
}

/// Edges of `curr` that `prev` did not already account for.
///
/// An edge qualifies when it touches a vertex absent from `prev` or carries a
/// timestamp after `prev`'s window. Its weight is the increase over `prev`'s
/// weight for the same triple, so `merge_edges(prev.edges, delta)` restores
/// `curr.edges` whenever both snapshots share `t_start`.
pub fn delta_edges(prev: &HetGraph, curr: &HetGraph) -> Result<EdgeDelta> {
    if prev.window.t_end > curr.window.t_end {
        return Err(Error::Argument(format!(
            "previous snapshot ends at {} after current snapshot end {}",
            prev.window.t_end, curr.window.t_end
        )));
    }
    let new_vertices: BTreeSet<Vertex> =
        curr.vertices.difference(&prev.vertices).copied().collect();
    let prev_weight: HashMap<Triple, u64> =
        prev.edges.iter().map(|e| (e.triple(), e.weight)).collect();

    let delta_edges = curr
        .edges
        .iter()
        .filter_map(|e| {
            let touches_new = new_vertices.contains(&e.head) || new_vertices.contains(&e.tail);
            if !touches_new && e.timestamp <= prev.window.t_end {
                return None;
            }
            let weight = e
                .weight
                .saturating_sub(prev_weight.get(&e.triple()).copied().unwrap_or(0));
            (weight > 0).then_some(Edge { weight, ..*e })
        })
        .collect();
    Ok(EdgeDelta {
        new_vertices,
        delta_edges,
    })
}

/// Multiset union keyed by triple: weights add, timestamps take the maximum.
pub fn merge_edges(prev_edges: &[Edge], delta: &EdgeDelta) -> Vec<Edge> {
    let mut merged: BTreeMap<Triple, Edge> = BTreeMap::new();
    for e in prev_edges.iter().chain(&delta.delta_edges) {
        merged
            .entry(e.triple())
            .and_modify(|m| {
                m.weight += e.weight;
                m.timestamp = m.timestamp.max(e.timestamp);
            })
            .or_insert(*e);
    }
    merged.into_values().collect()
}

/// Wraps a merged edge list back into a graph over `window`.
pub fn graph_from_edges(edges: Vec<Edge>, window: Window) -> HetGraph {
    let vertices = edges.iter().flat_map(|e| [e.head, e.tail]).collect();
    let mut edges = edges;
    edges.sort_by_key(Edge::triple);
    HetGraph {
        vertices,
        edges,
        window,
    }
}

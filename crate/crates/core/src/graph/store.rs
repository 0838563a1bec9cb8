use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Edge, HetGraph, Vertex, Window};
use crate::error::{Error, Result};
use crate::io::{read_json, read_jsonl, read_jsonl_values, write_json, write_jsonl};
use crate::world::{EventLog, EventRecord};

pub const GRAPH_FORMAT_VERSION: u32 = 1;

const VERTICES: &str = "vertices.jsonl";
const EDGES: &str = "edges.jsonl";
const MANIFEST: &str = "graph.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    window: Window,
}

/// Writes `vertices.jsonl`, `edges.jsonl` and a small manifest holding the
/// window into `dir`.
pub fn save_snapshot(graph: &HetGraph, dir: &Path) -> Result<()> {
    write_jsonl(&dir.join(VERTICES), &graph.vertices)?;
    write_jsonl(&dir.join(EDGES), &graph.edges)?;
    write_json(
        &dir.join(MANIFEST),
        &Manifest {
            format_version: GRAPH_FORMAT_VERSION,
            window: graph.window,
        },
    )
}

pub fn load_snapshot(dir: &Path) -> Result<HetGraph> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    if manifest.format_version != GRAPH_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "graph format version {} (expected {GRAPH_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let vertices: Vec<Vertex> = read_jsonl(&dir.join(VERTICES))?;
    let mut edges: Vec<Edge> = read_jsonl(&dir.join(EDGES))?;
    edges.sort_by_key(Edge::triple);
    let graph = HetGraph {
        vertices: vertices.into_iter().collect(),
        edges,
        window: manifest.window,
    };
    if !graph.is_closed() {
        return Err(Error::DataIntegrity(format!(
            "graph snapshot in {} has dangling edge endpoints",
            dir.display()
        )));
    }
    Ok(graph)
}

/// Reads an event log, dropping lines that are not valid event records.
/// Returns the parsed events and the number of dropped lines.
pub fn read_event_log_lenient(path: &Path) -> Result<(EventLog, usize)> {
    let (values, mut dropped) = read_jsonl_values(path)?;
    let mut events = Vec::with_capacity(values.len());
    for v in values {
        match serde_json::from_value::<EventRecord>(v) {
            Ok(e) => events.push(e),
            Err(_) => dropped += 1,
        }
    }
    Ok((events, dropped))
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;
    use crate::graph::build_graph;
    use crate::world::{AdId, AdvertiserId, EventType, UserId};

    #[test]
    fn snapshot_round_trip() {
        let events = vec![
            EventRecord {
                ts: 3,
                user_id: UserId(1),
                ad_id: AdId(2),
                advertiser_id: AdvertiserId(0),
                event: EventType::PositiveEngagement,
                objective: 1,
            },
            EventRecord {
                ts: 4,
                user_id: UserId(5),
                ad_id: AdId(2),
                advertiser_id: AdvertiserId(0),
                event: EventType::NegativeEngagement,
                objective: 1,
            },
        ];
        let (g, _) = build_graph(&events, Window::new(0, 10).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_snapshot(&g, dir.path()).unwrap();
        assert_eq!(load_snapshot(dir.path()).unwrap(), g);
    }

    #[test]
    fn lenient_reader_counts_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(
            f,
            r#"{{"ts":1,"user_id":0,"ad_id":0,"advertiser_id":0,"event":"impression","objective":1}}"#
        )
        .unwrap();
        writeln!(f, r#"{{"ts":2,"user_id":0,"event":"impression"}}"#).unwrap();
        writeln!(f, "not json").unwrap();
        let (events, dropped) = read_event_log_lenient(&path).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(dropped, 2);
    }
}

//! Graph dumps: `graph.json` describes clusters, arcs and parent arcs; the
//! observations and snapshots they reference live in a sidecar blob.
//!
//! Blob layout: observations as little-endian `f32` runs, snapshots as raw
//! bytes, each addressed by byte offset and length from the JSON.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Cluster, ClusterGraph, ClusterId, ParentArc};
use crate::pmdp::{Observation, Snapshot, UnitId};

pub const GRAPH_FORMAT: &str = "rbx-graph";
pub const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphIoError {
    #[error("graph dump I/O: {0}")]
    Io(#[from] io::Error),
    #[error("graph dump JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("graph dump: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRef {
    pub offset: u64,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRef {
    pub offset: u64,
    pub len: usize,
    pub version: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub id: u32,
    pub created_at: u64,
    pub visit_count: u64,
    pub unit: Option<u32>,
    /// Index into `observations`.
    pub center: usize,
    pub snapshot: SnapshotRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcRecord {
    pub from: u32,
    pub to: u32,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParentRecord {
    pub child: u32,
    pub parent: u32,
    /// Indices into `observations`.
    pub prefix: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub format: String,
    pub version: u32,
    /// File name of the blob, relative to the JSON file.
    pub blob: String,
    pub root: u32,
    pub next_id: u32,
    /// Distinct observations; clusters and prefixes refer to them by index.
    pub observations: Vec<ObservationRef>,
    pub clusters: Vec<ClusterRecord>,
    pub arcs: Vec<ArcRecord>,
    pub parents: Vec<ParentRecord>,
}

#[derive(Default)]
struct BlobWriter {
    bytes: Vec<u8>,
    observations: Vec<ObservationRef>,
    seen: HashMap<Vec<u32>, usize>,
}

impl BlobWriter {
    fn observation(&mut self, obs: &Observation) -> usize {
        let bits = obs.to_bits();
        if let Some(&i) = self.seen.get(&bits) {
            return i;
        }
        let r = ObservationRef {
            offset: self.bytes.len() as u64,
            height: obs.height(),
            width: obs.width(),
        };
        for v in obs.values() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.observations.push(r);
        self.seen.insert(bits, self.observations.len() - 1);
        self.observations.len() - 1
    }

    fn snapshot(&mut self, snap: &Snapshot) -> SnapshotRef {
        let r = SnapshotRef {
            offset: self.bytes.len() as u64,
            len: snap.bytes().len(),
            version: snap.version(),
        };
        self.bytes.extend_from_slice(snap.bytes());
        r
    }
}

/// Serialize `graph` into its JSON description and blob bytes.
pub fn encode(graph: &ClusterGraph, blob_name: &str) -> (GraphDump, Vec<u8>) {
    let mut w = BlobWriter::default();
    let clusters = graph
        .clusters()
        .map(|c| ClusterRecord {
            id: c.id.0,
            created_at: c.created_at,
            visit_count: c.visit_count,
            unit: c.unit.map(|u| u.0),
            center: w.observation(&c.center),
            snapshot: w.snapshot(&c.snapshot),
        })
        .collect();
    let arcs = graph
        .arcs()
        .iter()
        .map(|(&(from, to), &count)| ArcRecord {
            from: from.0,
            to: to.0,
            count,
        })
        .collect();
    let parents = graph
        .parent_arcs()
        .iter()
        .map(|(child, arc)| ParentRecord {
            child: child.0,
            parent: arc.parent.0,
            prefix: arc.prefix.iter().map(|o| w.observation(o)).collect(),
        })
        .collect();
    let dump = GraphDump {
        format: GRAPH_FORMAT.into(),
        version: GRAPH_VERSION,
        blob: blob_name.into(),
        root: graph.root().0,
        next_id: graph.next_id(),
        observations: w.observations,
        clusters,
        arcs,
        parents,
    };
    (dump, w.bytes)
}

fn slice(blob: &[u8], offset: u64, len: usize) -> Result<&[u8], GraphIoError> {
    let start = usize::try_from(offset).map_err(|_| GraphIoError::Invalid("offset overflow".into()))?;
    blob.get(start..start.saturating_add(len))
        .filter(|s| s.len() == len)
        .ok_or_else(|| GraphIoError::Invalid(format!("range {start}+{len} outside blob of {} bytes", blob.len())))
}

/// Rebuild a graph from a dump and its blob.
pub fn decode(dump: &GraphDump, blob: &[u8]) -> Result<ClusterGraph, GraphIoError> {
    if dump.format != GRAPH_FORMAT || dump.version != GRAPH_VERSION {
        return Err(GraphIoError::Invalid(format!(
            "unsupported format {} v{}",
            dump.format, dump.version
        )));
    }
    let observations = dump
        .observations
        .iter()
        .map(|r| {
            let bytes = slice(blob, r.offset, r.height * r.width * 4)?;
            let values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Observation::new(r.height, r.width, values)
                .map_err(|e| GraphIoError::Invalid(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let obs = |i: usize| {
        observations
            .get(i)
            .cloned()
            .ok_or_else(|| GraphIoError::Invalid(format!("observation index {i} out of range")))
    };
    let clusters = dump
        .clusters
        .iter()
        .map(|c| {
            Ok(Cluster {
                id: ClusterId(c.id),
                center: obs(c.center)?,
                snapshot: Snapshot::new(
                    c.snapshot.version,
                    slice(blob, c.snapshot.offset, c.snapshot.len)?.to_vec(),
                ),
                unit: c.unit.map(UnitId),
                visit_count: c.visit_count,
                created_at: c.created_at,
            })
        })
        .collect::<Result<Vec<_>, GraphIoError>>()?;
    let arcs = dump
        .arcs
        .iter()
        .map(|a| ((ClusterId(a.from), ClusterId(a.to)), a.count))
        .collect();
    let parents = dump
        .parents
        .iter()
        .map(|p| {
            let prefix = p.prefix.iter().map(|&i| obs(i)).collect::<Result<_, _>>()?;
            Ok((
                ClusterId(p.child),
                ParentArc {
                    parent: ClusterId(p.parent),
                    prefix,
                },
            ))
        })
        .collect::<Result<Vec<_>, GraphIoError>>()?;
    let graph = ClusterGraph::from_parts(clusters, arcs, parents, ClusterId(dump.root), dump.next_id);
    graph.check_invariants().map_err(GraphIoError::Invalid)?;
    Ok(graph)
}

/// Write `<dir>/graph.json` and `<dir>/graph.bin`.
pub fn save(graph: &ClusterGraph, dir: &Path) -> Result<(), GraphIoError> {
    let (dump, blob) = encode(graph, "graph.bin");
    fs::write(dir.join("graph.bin"), blob)?;
    fs::write(dir.join("graph.json"), serde_json::to_vec_pretty(&dump)?)?;
    Ok(())
}

/// Read a dump written by [`save`]; `json` is the path of the JSON file.
pub fn load(json: &Path) -> Result<ClusterGraph, GraphIoError> {
    let dump: GraphDump = serde_json::from_slice(&fs::read(json)?)?;
    let blob_path = json.parent().unwrap_or(Path::new(".")).join(&dump.blob);
    decode(&dump, &fs::read(blob_path)?)
}

//! Model directories: `graph.json` plus a weight bundle.
//!
//! ```text
//! model/
//!   graph.json          {"format": "widthfold-graph", "version": 1,
//!                        "weights": "weights", "nodes": [...], "edges": [...]}
//!   weights/manifest.json
//!   weights/tensors.bin
//! ```
//!
//! Each node is `{"id": ..., "op": ..., <op attributes>}`; each edge is
//! `{"from": producer id, "to": consumer id, "port": input index}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Graph, Node, Op};
use crate::error::{Error, Result};
use crate::tensor::{read_bundle, write_bundle, TensorBundle};

pub const GRAPH_FILE: &str = "graph.json";
pub const WEIGHTS_DIR: &str = "weights";
const FORMAT_TAG: &str = "widthfold-graph";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct GraphFile {
    format: String,
    version: u32,
    weights: String,
    nodes: Vec<NodeRecord>,
    edges: Vec<Edge>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRecord {
    id: String,
    #[serde(flatten)]
    op: Op,
}

#[derive(Debug, Serialize, Deserialize)]
struct Edge {
    from: String,
    to: String,
    port: usize,
}

fn to_file(g: &Graph) -> GraphFile {
    let mut nodes = Vec::with_capacity(g.nodes().len());
    let mut edges = Vec::new();
    for n in g.nodes() {
        nodes.push(NodeRecord {
            id: n.id.clone(),
            op: n.op.clone(),
        });
        for (port, from) in n.inputs.iter().enumerate() {
            edges.push(Edge {
                from: from.clone(),
                to: n.id.clone(),
                port,
            });
        }
    }
    GraphFile {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        weights: WEIGHTS_DIR.into(),
        nodes,
        edges,
    }
}

fn from_file(file: GraphFile, bundle: TensorBundle) -> Result<Graph> {
    if file.format != FORMAT_TAG || file.version != FORMAT_VERSION {
        return Err(Error::GraphFormat(format!(
            "unsupported format '{}' version {}",
            file.format, file.version
        )));
    }
    let mut ports: BTreeMap<&str, Vec<Option<String>>> = BTreeMap::new();
    for e in &file.edges {
        let slots = ports.entry(e.to.as_str()).or_default();
        if slots.len() <= e.port {
            slots.resize(e.port + 1, None);
        }
        if slots[e.port].replace(e.from.clone()).is_some() {
            return Err(Error::GraphFormat(format!(
                "node '{}' has two edges into port {}",
                e.to, e.port
            )));
        }
    }
    let mut nodes = Vec::with_capacity(file.nodes.len());
    for rec in file.nodes {
        let inputs = ports
            .remove(rec.id.as_str())
            .unwrap_or_default()
            .into_iter()
            .enumerate()
            .map(|(port, from)| {
                from.ok_or_else(|| {
                    Error::GraphFormat(format!("node '{}' has no edge into port {port}", rec.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        nodes.push(Node {
            id: rec.id,
            op: rec.op,
            inputs,
        });
    }
    if let Some(dangling) = ports.keys().next() {
        return Err(Error::GraphFormat(format!(
            "edge into unknown node '{dangling}'"
        )));
    }
    let weights = bundle.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    Graph::new(nodes, weights)
}

/// Parses a graph from its JSON text and an already loaded bundle.
pub fn parse_graph(json: &str, bundle: TensorBundle) -> Result<Graph> {
    let file: GraphFile =
        serde_json::from_str(json).map_err(|e| Error::GraphFormat(e.to_string()))?;
    from_file(file, bundle)
}

pub fn graph_json(g: &Graph) -> String {
    serde_json::to_string_pretty(&to_file(g)).expect("graph serializes") + "\n"
}

pub fn load_model(dir: &Path) -> Result<Graph> {
    let path = dir.join(GRAPH_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: GraphFile =
        serde_json::from_str(&text).map_err(|e| Error::GraphFormat(e.to_string()))?;
    let bundle = read_bundle(&dir.join(&file.weights))?;
    from_file(file, bundle)
}

pub fn save_model(g: &Graph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bundle: TensorBundle = g
        .weights()
        .iter()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    write_bundle(&bundle, &dir.join(WEIGHTS_DIR))?;
    let path = dir.join(GRAPH_FILE);
    fs::write(&path, graph_json(g)).map_err(|e| Error::io(&path, e))
}

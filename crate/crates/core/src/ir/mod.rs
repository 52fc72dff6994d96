//! A small dataflow graph IR over NHWC tensors.
//!
//! Nodes are stored in topological order: every input of a node is produced
//! by an earlier node. Convolution filters, matmul right-hand sides and biases
//! come from `constant` nodes that name entries of the graph's weight map.

mod cost;
mod format;
mod interp;
mod pass;
mod shape;

pub use cost::{cost, CostEstimate};
pub use format::{graph_json, load_model, parse_graph, save_model, GRAPH_FILE, WEIGHTS_DIR};
pub use interp::{interpret, interpret_with, Execution};
pub use pass::{
    width_fold_pass, Decision, NodeDecision, NodeKind, PassOptions, RewriteReport,
};
pub use shape::{infer_shapes, Shapes};

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a folded convolution is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lowering {
    /// Plain convolution with the dense expanded filter.
    Dense,
    /// One group per diagonal block, skipping the zero blocks.
    Grouped,
}

/// Marks a convolution produced by the folding pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FoldAttr {
    pub factor: usize,
    pub lowering: Lowering,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Input {
        shape: Vec<usize>,
    },
    Constant {
        weight: String,
    },
    /// Inputs: `[x, filter]`.
    Conv2d {
        stride: [usize; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fold: Option<FoldAttr>,
    },
    /// Inputs: `[a, b]`.
    Matmul,
    /// Inputs: `[y, bias]`.
    BiasAdd,
    Reshape {
        shape: Vec<usize>,
    },
    Output,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant { .. } => "constant",
            Op::Conv2d { .. } => "conv2d",
            Op::Matmul => "matmul",
            Op::BiasAdd => "bias_add",
            Op::Reshape { .. } => "reshape",
            Op::Output => "output",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Input { .. } | Op::Constant { .. } => 0,
            Op::Reshape { .. } | Op::Output => 1,
            Op::Conv2d { .. } | Op::Matmul | Op::BiasAdd => 2,
        }
    }

    /// Input ports that must be fed by a constant node.
    fn constant_ports(&self) -> &'static [usize] {
        match self {
            Op::Conv2d { .. } | Op::Matmul | Op::BiasAdd => &[1],
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    weights: BTreeMap<String, Tensor>,
}

impl Graph {
    /// Builds and validates a graph.
    pub fn new(nodes: Vec<Node>, weights: BTreeMap<String, Tensor>) -> Result<Self> {
        let g = Self { nodes, weights };
        g.validate()?;
        Ok(g)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `(id, shape)` of every graph input, in node order.
    pub fn inputs(&self) -> Vec<(&str, &[usize])> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input { shape } => Some((n.id.as_str(), shape.as_slice())),
                _ => None,
            })
            .collect()
    }

    pub fn outputs(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.op == Op::Output)
            .map(|n| n.id.as_str())
            .collect()
    }

    /// The weight tensor behind constant node `id`.
    pub fn constant(&self, id: &str) -> Option<(&str, &Tensor)> {
        match &self.node(id)?.op {
            Op::Constant { weight } => self.weights.get_key_value(weight).map(|(k, v)| (k.as_str(), v)),
            _ => None,
        }
    }

    /// Number of nodes reading each node's value.
    pub fn consumer_counts(&self) -> HashMap<&str, usize> {
        let mut counts: HashMap<&str, usize> = self.nodes.iter().map(|n| (n.id.as_str(), 0)).collect();
        for n in &self.nodes {
            for i in &n.inputs {
                *counts.entry(i.as_str()).or_default() += 1;
            }
        }
        counts
    }

    /// Same structure and bitwise-identical weights.
    pub fn bitwise_eq(&self, other: &Graph) -> bool {
        self.nodes == other.nodes
            && self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }

    /// Structural checks: unique ids, arity, topological order, constant
    /// operands and resolvable weights. Shapes are checked by [`infer_shapes`].
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashSet<&str> = HashSet::new();
        let by_id: HashMap<&str, &Node> = self.nodes.iter().map(|n| (n.id.as_str(), n)).collect();
        for node in &self.nodes {
            let fail = |msg: String| Error::GraphFormat(format!("node '{}': {msg}", node.id));
            if node.id.is_empty() {
                return Err(Error::GraphFormat("node with empty id".into()));
            }
            if node.inputs.len() != node.op.arity() {
                return Err(fail(format!(
                    "{} takes {} inputs, got {}",
                    node.op.name(),
                    node.op.arity(),
                    node.inputs.len()
                )));
            }
            for (port, input) in node.inputs.iter().enumerate() {
                if !seen.contains(input.as_str()) {
                    return Err(fail(format!(
                        "input '{input}' is not produced by an earlier node"
                    )));
                }
                let producer = by_id[input.as_str()];
                if producer.op == Op::Output {
                    return Err(fail(format!("reads output node '{input}'")));
                }
                if node.op.constant_ports().contains(&port)
                    && !matches!(producer.op, Op::Constant { .. })
                {
                    return Err(fail(format!(
                        "port {port} must be fed by a constant, got {} '{input}'",
                        producer.op.name()
                    )));
                }
            }
            if let Op::Constant { weight } = &node.op {
                if !self.weights.contains_key(weight) {
                    return Err(fail(format!("unknown weight '{weight}'")));
                }
            }
            if !seen.insert(node.id.as_str()) {
                return Err(fail("duplicate id".into()));
            }
        }
        Ok(())
    }
}

/// Incremental graph construction.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    weights: BTreeMap<String, Tensor>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, id: &str, op: Op, inputs: &[&str]) -> String {
        self.nodes.push(Node {
            id: id.to_string(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        });
        id.to_string()
    }

    pub fn input(&mut self, id: &str, shape: &[usize]) -> String {
        self.push(
            id,
            Op::Input {
                shape: shape.to_vec(),
            },
            &[],
        )
    }

    /// A constant node named `id` backed by weight `id`.
    pub fn constant(&mut self, id: &str, value: Tensor) -> String {
        self.weights.insert(id.to_string(), value);
        self.push(
            id,
            Op::Constant {
                weight: id.to_string(),
            },
            &[],
        )
    }

    pub fn conv2d(&mut self, id: &str, x: &str, filter: &str, stride: [usize; 2]) -> String {
        self.push(id, Op::Conv2d { stride, fold: None }, &[x, filter])
    }

    pub fn bias_add(&mut self, id: &str, y: &str, bias: &str) -> String {
        self.push(id, Op::BiasAdd, &[y, bias])
    }

    pub fn matmul(&mut self, id: &str, a: &str, b: &str) -> String {
        self.push(id, Op::Matmul, &[a, b])
    }

    pub fn reshape(&mut self, id: &str, x: &str, shape: &[usize]) -> String {
        self.push(
            id,
            Op::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }

    pub fn output(&mut self, id: &str, x: &str) -> String {
        self.push(id, Op::Output, &[x])
    }

    pub fn build(self) -> Result<Graph> {
        Graph::new(self.nodes, self.weights)
    }
}

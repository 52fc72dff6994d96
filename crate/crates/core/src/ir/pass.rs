//! The width-folding rewrite.
//!
//! A legal `conv2d` (optionally followed by its only consumer, a
//! `bias_add`) becomes
//!
//! ```text
//! reshape(x -> folded input) -> conv2d(expanded filter) [-> bias_add(tiled bias)] -> reshape(-> original output)
//! ```
//!
//! and a legal `matmul` becomes the same reshape/conv/reshape sequence over
//! a 1x1 convolution whose width axis is the row axis of `A`. The final
//! reshape takes over the id of the replaced node, so consumers are left
//! untouched. Both reshapes are exact re-indexings because NHWC width
//! folding is a row-major reshape.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::shape::{conv_spec, gemm_spec};
use super::{cost, infer_shapes, CostEstimate, FoldAttr, Graph, Lowering, Node, Op, Shapes};
use crate::error::Result;
use crate::fold::{
    check_legality, expand_filter_general, replicate_bias, FoldFactor, FoldPlan, FoldReason,
    FoldStatus, DEFAULT_ALIGN,
};
use crate::refconv::ConvSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PassOptions {
    pub factor: FoldFactor,
    pub align: usize,
    pub lowering: Lowering,
}

impl Default for PassOptions {
    fn default() -> Self {
        Self {
            factor: FoldFactor::Auto,
            align: DEFAULT_ALIGN,
            lowering: Lowering::Grouped,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Conv2d,
    Matmul,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision")]
pub enum Decision {
    Applied { plan: FoldPlan, lowering: Lowering },
    Skipped { reason: FoldReason },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDecision {
    pub node: String,
    pub kind: NodeKind,
    #[serde(flatten)]
    pub decision: Decision,
}

impl NodeDecision {
    pub fn is_applied(&self) -> bool {
        matches!(self.decision, Decision::Applied { .. })
    }

    pub fn reason(&self) -> Option<FoldReason> {
        match self.decision {
            Decision::Applied { .. } => None,
            Decision::Skipped { reason } => Some(reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteReport {
    /// `"auto"` or the fixed factor.
    pub factor: String,
    pub align: usize,
    pub nodes: Vec<NodeDecision>,
    pub before: CostEstimate,
    pub after: CostEstimate,
}

impl RewriteReport {
    pub fn applied(&self) -> usize {
        self.nodes.iter().filter(|d| d.is_applied()).count()
    }

    pub fn skipped(&self) -> usize {
        self.nodes.len() - self.applied()
    }
}

/// Rewrites every legal, misaligned conv2d/matmul node of `g`.
///
/// Nodes whose reduction channels are already aligned, nodes previously
/// produced by this pass and folds with `F == 1` are skipped as
/// [`FoldReason::AlreadyAligned`]; illegal folds are skipped with their
/// legality reason. Fails only if `g` itself does not shape-check.
pub fn width_fold_pass(g: &Graph, opts: PassOptions) -> Result<(Graph, RewriteReport)> {
    let shapes = infer_shapes(g)?;
    let before = cost(g, opts.align)?;
    let consumers = g.consumer_counts();

    let mut rw = Rewriter {
        graph: g,
        shapes: &shapes,
        opts,
        nodes: Vec::with_capacity(g.nodes().len()),
        weights: g.weights().clone(),
        fused: HashSet::new(),
        decisions: Vec::new(),
    };

    for node in g.nodes() {
        if rw.fused.contains(node.id.as_str()) {
            continue;
        }
        match &node.op {
            Op::Conv2d { stride, fold } => {
                let plan = if fold.is_some() {
                    Err(FoldReason::AlreadyAligned)
                } else {
                    let spec = conv_spec(&shapes[&node.inputs[0]], &shapes[&node.inputs[1]], *stride)?;
                    rw.plan(&spec)
                };
                match plan {
                    Ok(plan) => {
                        let bias = fusable_bias(g, node, &consumers);
                        rw.rewrite_conv(node, &plan, bias);
                        rw.decide(node, NodeKind::Conv2d, Ok(plan));
                    }
                    Err(reason) => {
                        rw.nodes.push(node.clone());
                        rw.decide(node, NodeKind::Conv2d, Err(reason));
                    }
                }
            }
            Op::Matmul => {
                let gemm = gemm_spec(&shapes[&node.inputs[0]], &shapes[&node.inputs[1]])?;
                // A as a width-M row of K-channel pixels, B as a 1x1 kernel.
                let view = ConvSpec::new([1, 1, gemm.m, gemm.k], [1, 1, gemm.k, gemm.n], [1, 1])?;
                match rw.plan(&view) {
                    Ok(plan) => {
                        rw.rewrite_matmul(node, &plan);
                        rw.decide(node, NodeKind::Matmul, Ok(plan));
                    }
                    Err(reason) => {
                        rw.nodes.push(node.clone());
                        rw.decide(node, NodeKind::Matmul, Err(reason));
                    }
                }
            }
            _ => rw.nodes.push(node.clone()),
        }
    }

    let Rewriter {
        nodes,
        weights,
        decisions,
        ..
    } = rw;
    let out = prune(g, nodes, weights)?;
    let after = cost(&out, opts.align)?;
    let report = RewriteReport {
        factor: match opts.factor {
            FoldFactor::Auto => "auto".into(),
            FoldFactor::Fixed(f) => f.to_string(),
        },
        align: opts.align,
        nodes: decisions,
        before,
        after,
    };
    Ok((out, report))
}

struct Rewriter<'g> {
    graph: &'g Graph,
    shapes: &'g Shapes,
    opts: PassOptions,
    nodes: Vec<Node>,
    weights: BTreeMap<String, crate::tensor::Tensor>,
    fused: HashSet<&'g str>,
    decisions: Vec<NodeDecision>,
}

impl<'g> Rewriter<'g> {
    fn plan(&self, spec: &ConvSpec) -> Result<FoldPlan, FoldReason> {
        if spec.in_channels().is_multiple_of(self.opts.align.max(1)) {
            return Err(FoldReason::AlreadyAligned);
        }
        let plan = check_legality(spec, self.opts.factor, self.opts.align.max(1));
        match plan.status {
            FoldStatus::Fallback(reason) => Err(reason),
            FoldStatus::Apply if plan.factor == 1 => Err(FoldReason::AlreadyAligned),
            FoldStatus::Apply => Ok(plan),
        }
    }

    fn decide(&mut self, node: &Node, kind: NodeKind, outcome: Result<FoldPlan, FoldReason>) {
        let decision = match outcome {
            Ok(plan) => Decision::Applied {
                plan,
                lowering: self.opts.lowering,
            },
            Err(reason) => Decision::Skipped { reason },
        };
        self.decisions.push(NodeDecision {
            node: node.id.clone(),
            kind,
            decision,
        });
    }

    fn push(&mut self, id: String, op: Op, inputs: Vec<String>) {
        self.nodes.push(Node { id, op, inputs });
    }

    fn add_weight(&mut self, name: String, make: impl FnOnce() -> crate::tensor::Tensor) -> String {
        self.weights.entry(name.clone()).or_insert_with(make);
        name
    }

    /// Reshape, expanded-filter constant and folded conv for `node`.
    /// Returns the id of the folded conv.
    fn emit_folded_conv(&mut self, node: &Node, plan: &FoldPlan, filter_shape: [usize; 4]) -> String {
        let factor = plan.factor;
        let (wname, w) = self
            .graph
            .constant(&node.inputs[1])
            .expect("validated graphs feed filters from constants");
        let w = w.reshape(&filter_shape).expect("filter view preserves size");

        let x_id = format!("{}.fold_input", node.id);
        self.push(
            x_id.clone(),
            Op::Reshape {
                shape: plan.folded_input_shape.to_vec(),
            },
            vec![node.inputs[0].clone()],
        );

        let weight = self.add_weight(format!("{wname}.fold{factor}"), || {
            expand_filter_general(&w, factor).expect("legal plan")
        });
        let w_id = format!("{}.folded_filter", node.id);
        self.push(w_id.clone(), Op::Constant { weight }, vec![]);

        let conv_id = format!("{}.folded", node.id);
        self.push(
            conv_id.clone(),
            Op::Conv2d {
                stride: plan.original.stride,
                fold: Some(FoldAttr {
                    factor,
                    lowering: self.opts.lowering,
                }),
            },
            vec![x_id, w_id],
        );
        conv_id
    }

    fn rewrite_conv(&mut self, node: &'g Node, plan: &FoldPlan, bias: Option<&'g Node>) {
        let mut tail = self.emit_folded_conv(node, plan, plan.original.filter);
        let mut tail_id = node.id.as_str();

        if let Some(add) = bias {
            let (bname, b) = self
                .graph
                .constant(&add.inputs[1])
                .expect("validated graphs feed biases from constants");
            let factor = plan.factor;
            let weight = self.add_weight(format!("{bname}.tile{factor}"), || {
                replicate_bias(b, factor).expect("rank-1 bias")
            });
            let b_id = format!("{}.folded_bias", add.id);
            self.push(b_id.clone(), Op::Constant { weight }, vec![]);
            let add_id = format!("{}.folded", add.id);
            self.push(add_id.clone(), Op::BiasAdd, vec![tail, b_id]);
            tail = add_id;
            tail_id = add.id.as_str();
            self.fused.insert(add.id.as_str());
        }

        self.push(
            tail_id.to_string(),
            Op::Reshape {
                shape: self.shapes[tail_id].clone(),
            },
            vec![tail],
        );
    }

    fn rewrite_matmul(&mut self, node: &Node, plan: &FoldPlan) {
        let conv = self.emit_folded_conv(node, plan, plan.original.filter);
        self.push(
            node.id.clone(),
            Op::Reshape {
                shape: self.shapes[&node.id].clone(),
            },
            vec![conv],
        );
    }
}

/// The `bias_add` that is the sole consumer of conv `node`, if any.
fn fusable_bias<'g>(
    g: &'g Graph,
    node: &Node,
    consumers: &std::collections::HashMap<&str, usize>,
) -> Option<&'g Node> {
    if consumers.get(node.id.as_str()) != Some(&1) {
        return None;
    }
    g.nodes()
        .iter()
        .find(|n| n.op == Op::BiasAdd && n.inputs[0] == node.id)
}

/// Drops constants (and their weights) that lost all their consumers in the rewrite.
fn prune(
    original: &Graph,
    nodes: Vec<Node>,
    mut weights: BTreeMap<String, crate::tensor::Tensor>,
) -> Result<Graph> {
    let before = original.consumer_counts();
    let used: HashSet<&str> = nodes
        .iter()
        .flat_map(|n| n.inputs.iter().map(String::as_str))
        .collect();
    let orphaned: HashSet<String> = nodes
        .iter()
        .filter(|n| matches!(n.op, Op::Constant { .. }))
        .filter(|n| !used.contains(n.id.as_str()) && before.get(n.id.as_str()).copied().unwrap_or(0) > 0)
        .map(|n| n.id.clone())
        .collect();
    let nodes: Vec<Node> = nodes.into_iter().filter(|n| !orphaned.contains(&n.id)).collect();

    let referenced: HashSet<&str> = nodes
        .iter()
        .filter_map(|n| match &n.op {
            Op::Constant { weight } => Some(weight.as_str()),
            _ => None,
        })
        .collect();
    let originally_referenced: HashSet<&str> = original
        .nodes()
        .iter()
        .filter_map(|n| match &n.op {
            Op::Constant { weight } => Some(weight.as_str()),
            _ => None,
        })
        .collect();
    weights.retain(|name, _| {
        referenced.contains(name.as_str())
            || (!originally_referenced.contains(name.as_str()) && original.weights().contains_key(name))
    });
    Graph::new(nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{interpret, GraphBuilder};
    use crate::tensor::{max_abs_diff, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0f32..1.0)).unwrap()
    }

    fn golden_graph(width: usize, rng: &mut ChaCha8Rng) -> Graph {
        let mut b = GraphBuilder::new();
        b.input("x", &[1, 32, width, 1]);
        b.constant("w", rand_tensor(&[5, 1, 1, 1], rng));
        b.constant("b", rand_tensor(&[1], rng));
        b.conv2d("conv", "x", "w", [1, 1]);
        b.bias_add("add", "conv", "b");
        b.output("y", "add");
        b.build().unwrap()
    }

    fn check_equivalent(g: &Graph, h: &Graph, rng: &mut ChaCha8Rng) {
        let inputs: BTreeMap<String, Tensor> = g
            .inputs()
            .into_iter()
            .map(|(id, s)| (id.to_string(), rand_tensor(s, rng)))
            .collect();
        let (a, b) = (interpret(g, &inputs).unwrap(), interpret(h, &inputs).unwrap());
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
        for (k, v) in &a {
            assert!(max_abs_diff(v, &b[k]).unwrap() <= 1e-5, "output {k}");
        }
    }

    #[test]
    fn golden_graph_is_folded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = golden_graph(64, &mut rng);
        let opts = PassOptions { factor: FoldFactor::Fixed(8), ..Default::default() };
        let (h, report) = width_fold_pass(&g, opts).unwrap();
        assert_eq!(report.applied(), 1);
        let Decision::Applied { plan, .. } = &report.nodes[0].decision else { panic!() };
        assert_eq!(plan.expanded_filter_shape, [5, 1, 8, 8]);
        assert_eq!(h.weights()["w.fold8"].shape(), &[5, 1, 8, 8]);
        assert_eq!(h.weights()["b.tile8"].shape(), &[8]);
        assert!(!h.weights().contains_key("w"));
        assert_eq!((report.before.macs, report.before.aligned), (8960, false));
        assert_eq!((report.after.macs, report.after.aligned), (8960, true));
        check_equivalent(&g, &h, &mut rng);
    }

    #[test]
    fn indivisible_width_leaves_graph_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = golden_graph(7, &mut rng);
        let opts = PassOptions { factor: FoldFactor::Fixed(8), ..Default::default() };
        let (h, report) = width_fold_pass(&g, opts).unwrap();
        assert_eq!(report.nodes[0].reason(), Some(FoldReason::WidthNotDivisible));
        assert!(h.bitwise_eq(&g));
    }

    #[test]
    fn factor_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = golden_graph(64, &mut rng);
        let opts = PassOptions { factor: FoldFactor::Fixed(1), ..Default::default() };
        let (h, report) = width_fold_pass(&g, opts).unwrap();
        assert_eq!(report.nodes[0].reason(), Some(FoldReason::AlreadyAligned));
        assert!(h.bitwise_eq(&g));
    }

    #[test]
    fn chain_with_one_legal_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = GraphBuilder::new();
        b.input("x", &[1, 10, 16, 1]);
        b.constant("w1", rand_tensor(&[3, 1, 1, 2], &mut rng));
        b.conv2d("c1", "x", "w1", [1, 1]);
        b.constant("w2", rand_tensor(&[2, 3, 2, 1], &mut rng));
        b.conv2d("c2", "c1", "w2", [1, 1]);
        b.output("y", "c2");
        let g = b.build().unwrap();
        let (h, report) = width_fold_pass(&g, PassOptions::default()).unwrap();
        assert_eq!(report.applied(), 1);
        assert_eq!(report.nodes[1].reason(), Some(FoldReason::KernelSpansFoldAxis));
        check_equivalent(&g, &h, &mut rng);

        let (h2, report2) = width_fold_pass(&h, PassOptions::default()).unwrap();
        assert!(h2.bitwise_eq(&h));
        assert_eq!(report2.applied(), 0);
        assert_eq!(report2.nodes[0].node, "c1.folded");
        assert_eq!(report2.nodes[0].reason(), Some(FoldReason::AlreadyAligned));
    }

    #[test]
    fn shared_conv_output_is_not_fused() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = GraphBuilder::new();
        b.input("x", &[1, 4, 8, 1]);
        b.constant("w", rand_tensor(&[2, 1, 1, 1], &mut rng));
        b.conv2d("c", "x", "w", [1, 1]);
        b.constant("b", rand_tensor(&[1], &mut rng));
        b.bias_add("a", "c", "b");
        b.output("y1", "a");
        b.output("y2", "c");
        let g = b.build().unwrap();
        let (h, report) = width_fold_pass(&g, PassOptions::default()).unwrap();
        assert_eq!(report.applied(), 1);
        assert!(h.node("a").is_some_and(|n| n.op == Op::BiasAdd));
        assert!(h.weights().contains_key("b"));
        check_equivalent(&g, &h, &mut rng);
    }

    #[test]
    fn matmul_is_folded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut b = GraphBuilder::new();
        b.input("a", &[64, 3]);
        b.constant("m", rand_tensor(&[3, 4], &mut rng));
        b.matmul("mm", "a", "m");
        b.output("c", "mm");
        let g = b.build().unwrap();
        let (h, report) = width_fold_pass(&g, PassOptions::default()).unwrap();
        let Decision::Applied { plan, .. } = &report.nodes[0].decision else { panic!() };
        assert_eq!(plan.factor, 8);
        assert_eq!(plan.folded_input_shape[3], 24);
        assert!(report.after.aligned);
        assert_eq!(report.after.macs, report.before.macs);
        check_equivalent(&g, &h, &mut rng);
    }

    #[test]
    fn aligned_matmul_is_skipped() {
        let mut b = GraphBuilder::new();
        b.input("a", &[4, 16]);
        b.constant("m", Tensor::zeros(vec![16, 2]).unwrap());
        b.matmul("mm", "a", "m");
        let g = b.build().unwrap();
        let (h, report) = width_fold_pass(&g, PassOptions::default()).unwrap();
        assert_eq!(report.nodes[0].reason(), Some(FoldReason::AlreadyAligned));
        assert!(h.bitwise_eq(&g));
    }

    #[test]
    fn unused_weights_survive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = golden_graph(64, &mut rng);
        let mut weights = g.weights().clone();
        weights.insert("spare".into(), Tensor::zeros(vec![2]).unwrap());
        let g = Graph::new(g.nodes().to_vec(), weights).unwrap();
        let (h, _) = width_fold_pass(&g, PassOptions::default()).unwrap();
        assert!(h.weights().contains_key("spare"));
    }
}

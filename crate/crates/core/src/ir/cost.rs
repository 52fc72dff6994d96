use serde::{Deserialize, Serialize};

use super::shape::{conv_spec, gemm_spec};
use super::{infer_shapes, Graph, Lowering, Op};
use crate::error::Result;
use crate::refconv::count_macs;

/// Shape-only cost summary of a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    /// Multiply-accumulates over all conv2d and matmul nodes. Grouped folded
    /// convolutions count only their diagonal blocks.
    pub macs: u64,
    /// Every conv2d/matmul reduction channel extent is a multiple of the alignment.
    pub aligned: bool,
    /// Floats held by the weights, with grouped folded filters counted at block size.
    pub footprint_floats: u64,
}

pub fn cost(g: &Graph, align: usize) -> Result<CostEstimate> {
    let shapes = infer_shapes(g)?;
    let align = align.max(1);
    let mut macs = 0u64;
    let mut aligned = true;
    let mut footprint = 0u64;
    // weight name -> floats charged
    let mut charged = std::collections::BTreeMap::<&str, u64>::new();

    for node in g.nodes() {
        match &node.op {
            Op::Conv2d { stride, fold } => {
                let spec = conv_spec(&shapes[&node.inputs[0]], &shapes[&node.inputs[1]], *stride)?;
                let dense = count_macs(&spec).0;
                let grouped = fold.filter(|a| a.lowering == Lowering::Grouped);
                macs += match grouped {
                    Some(attr) => dense / attr.factor as u64,
                    None => dense,
                };
                aligned &= spec.in_channels() % align == 0;
                if let Some((name, w)) = g.constant(&node.inputs[1]) {
                    let floats = match grouped {
                        Some(attr) => (w.len() / attr.factor) as u64,
                        None => w.len() as u64,
                    };
                    let entry = charged.entry(name).or_insert(0);
                    *entry = (*entry).max(floats);
                }
            }
            Op::Matmul => {
                let spec = gemm_spec(&shapes[&node.inputs[0]], &shapes[&node.inputs[1]])?;
                macs += (spec.m * spec.k * spec.n) as u64;
                aligned &= spec.k % align == 0;
            }
            _ => {}
        }
    }
    for node in g.nodes() {
        if let Op::Constant { weight } = &node.op {
            if !charged.contains_key(weight.as_str()) {
                charged.insert(weight, g.weights()[weight].len() as u64);
            }
        }
    }
    footprint += charged.values().sum::<u64>();
    Ok(CostEstimate {
        macs,
        aligned,
        footprint_floats: footprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::GraphBuilder;
    use crate::tensor::Tensor;

    #[test]
    fn empty_graph_is_vacuously_aligned() {
        let c = cost(&Graph::default(), 8).unwrap();
        assert_eq!(c, CostEstimate { macs: 0, aligned: true, footprint_floats: 0 });
    }

    #[test]
    fn golden_conv_cost() {
        let mut b = GraphBuilder::new();
        b.input("x", &[1, 32, 64, 1]);
        b.constant("w", Tensor::zeros(vec![5, 1, 1, 1]).unwrap());
        b.conv2d("c", "x", "w", [1, 1]);
        b.output("y", "c");
        let c = cost(&b.build().unwrap(), 8).unwrap();
        assert_eq!((c.macs, c.aligned, c.footprint_floats), (8960, false, 5));
    }

    #[test]
    fn matmul_cost() {
        let mut b = GraphBuilder::new();
        b.input("a", &[10, 8]);
        b.constant("m", Tensor::zeros(vec![8, 3]).unwrap());
        b.matmul("mm", "a", "m");
        let c = cost(&b.build().unwrap(), 8).unwrap();
        assert_eq!((c.macs, c.aligned, c.footprint_floats), (240, true, 24));
    }
}

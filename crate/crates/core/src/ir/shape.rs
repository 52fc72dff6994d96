use std::collections::BTreeMap;

use super::{Graph, Op};
use crate::error::{Error, Result};
use crate::gemm::GemmSpec;
use crate::refconv::ConvSpec;

/// Output shape of every node, keyed by node id.
pub type Shapes = BTreeMap<String, Vec<usize>>;

/// Validates `g` and computes the output shape of every node.
pub fn infer_shapes(g: &Graph) -> Result<Shapes> {
    g.validate()?;
    let mut shapes = Shapes::new();
    for node in g.nodes() {
        let fail = |reason: String| Error::shape_inference(&node.id, reason);
        let operand = |i: usize| -> &Vec<usize> { &shapes[&node.inputs[i]] };
        let shape = match &node.op {
            Op::Input { shape } => {
                if shape.contains(&0) {
                    return Err(fail(format!("input shape {shape:?} has a zero extent")));
                }
                shape.clone()
            }
            Op::Constant { weight } => g.weights()[weight].shape().to_vec(),
            Op::Conv2d { stride, fold } => {
                let spec = conv_spec(operand(0), operand(1), *stride).map_err(|e| fail(e.to_string()))?;
                if let Some(attr) = fold {
                    let [_, _, cin, cout] = spec.filter;
                    if attr.factor == 0 || cin % attr.factor != 0 || cout % attr.factor != 0 {
                        return Err(fail(format!(
                            "filter {:?} does not split into {} diagonal blocks",
                            spec.filter, attr.factor
                        )));
                    }
                }
                spec.output_shape().to_vec()
            }
            Op::Matmul => {
                let spec = gemm_spec(operand(0), operand(1)).map_err(|e| fail(e.to_string()))?;
                spec.output_shape().to_vec()
            }
            Op::BiasAdd => {
                let (y, b) = (operand(0), operand(1));
                if b.len() != 1 || y.last() != Some(&b[0]) {
                    return Err(fail(format!(
                        "bias {b:?} does not match trailing extent of {y:?}"
                    )));
                }
                y.clone()
            }
            Op::Reshape { shape } => {
                let from = operand(0);
                if shape.contains(&0)
                    || shape.iter().product::<usize>() != from.iter().product::<usize>()
                {
                    return Err(fail(format!("cannot reshape {from:?} to {shape:?}")));
                }
                shape.clone()
            }
            Op::Output => operand(0).clone(),
        };
        shapes.insert(node.id.clone(), shape);
    }
    Ok(shapes)
}

pub(super) fn conv_spec(x: &[usize], w: &[usize], stride: [usize; 2]) -> Result<ConvSpec> {
    let input = <[usize; 4]>::try_from(x)
        .map_err(|_| Error::ShapeMismatch(format!("conv input {x:?} is not rank 4")))?;
    let filter = <[usize; 4]>::try_from(w)
        .map_err(|_| Error::ShapeMismatch(format!("conv filter {w:?} is not rank 4")))?;
    ConvSpec::new(input, filter, stride)
}

pub(super) fn gemm_spec(a: &[usize], b: &[usize]) -> Result<GemmSpec> {
    match (a, b) {
        ([m, k], [kb, n]) if k == kb => Ok(GemmSpec {
            m: *m,
            k: *k,
            n: *n,
        }),
        _ => Err(Error::ShapeMismatch(format!(
            "cannot multiply {a:?} by {b:?}"
        ))),
    }
}
